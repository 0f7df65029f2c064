use crate::data::{FrameSet, Span, StoryAnnotation};
use crate::error::{Error, Result};

/// The annotator whose clip selection agrees most with everybody else's.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGt {
    pub annotator: usize,
    pub spans: Vec<Span>,
    pub mean_iou: Vec<f64>,
    pub warning: Option<String>,
}

/// Picks the annotator with the largest mean pairwise IoU (frame sets given
/// by the union of their spans) against every other annotator. Ties go to
/// the lowest index.
pub fn pseudo_gt_clips(annotations: &[StoryAnnotation]) -> Result<PseudoGt> {
    match annotations {
        [] => Err(Error::Empty("pseudo-GT needs at least one annotator".into())),
        [only] => Ok(PseudoGt {
            annotator: 0,
            spans: only.spans(),
            mean_iou: vec![1.0],
            warning: Some(format!("video {} has a single annotator", only.video_id)),
        }),
        many => {
            let sets: Vec<FrameSet> = many.iter().map(|a| FrameSet::from_spans(&a.spans())).collect();
            let n = sets.len();
            let mean_iou: Vec<f64> = (0..n)
                .map(|i| {
                    let s: f64 = (0..n).filter(|&j| j != i).map(|j| sets[i].iou(&sets[j]).unwrap_or(0.0)).sum();
                    s / (n - 1) as f64
                })
                .collect();
            let mut best = 0;
            for i in 1..n {
                if mean_iou[i] > mean_iou[best] {
                    best = i;
                }
            }
            Ok(PseudoGt {
                annotator: best,
                spans: many[best].spans(),
                mean_iou,
                warning: None,
            })
        }
    }
}
