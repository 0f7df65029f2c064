//! Dataset model, on-disk formats, splits and the synthetic corpus.
//!
//! A dataset directory holds
//!
//! * `videos.jsonl`: one [`VideoEntry`] per line,
//! * `annotations.jsonl`: one [`StoryAnnotation`] per line,
//! * one binary feature file per video (see [`features`]).

pub mod checkpoint;
pub mod features;
pub mod pseudo_gt;
pub mod split;
pub mod synth;
pub mod words;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::tokenize;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointKind, CHECKPOINT_SCHEMA};
pub use pseudo_gt::{pseudo_gt_clips, PseudoGt};
pub use split::{make_split, DatasetSplit};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};
pub use words::{word_vectors, WordSource, WordVectorTable};

/// Frames are subsampled every tenth frame before features are stored.
pub const FRAME_STRIDE: f64 = 10.0;
pub const RESNET_FEATURE_DIM: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Birthday,
    Camping,
    Christmas,
    Wedding,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Birthday, Category::Camping, Category::Christmas, Category::Wedding];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Birthday => "birthday",
            Category::Camping => "camping",
            Category::Christmas => "christmas",
            Category::Wedding => "wedding",
        };
        f.write_str(s)
    }
}

/// A video as a `T x D` matrix of per-sampled-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub category: Category,
    /// Frame rate of the source video, used to convert second-based spans.
    pub fps: f64,
    pub frames: Matrix,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    /// Rows `span.start..span.end` of the feature matrix.
    pub fn clip(&self, span: Span) -> Result<Matrix> {
        span.check_within(self.num_frames())
            .map_err(|m| Error::validation(format!("video {} clip", self.id), m))?;
        self.frames.slice_rows(span.start, span.end)
    }
}

/// Half-open interval `[start, end)` of sampled frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    fn check_within(&self, num_frames: usize) -> std::result::Result<(), String> {
        if self.start >= self.end {
            Err(format!("empty span [{}, {})", self.start, self.end))
        } else if self.end > num_frames {
            Err(format!("span [{}, {}) exceeds video length {num_frames}", self.start, self.end))
        } else {
            Ok(())
        }
    }
}

/// Union of spans as a set of frame indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameSet(BTreeSet<usize>);

impl FrameSet {
    pub fn from_spans<'a>(spans: impl IntoIterator<Item = &'a Span>) -> Self {
        FrameSet(spans.into_iter().flat_map(|s| s.start..s.end).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Intersection over union; `None` when both sets are empty.
    pub fn iou(&self, other: &FrameSet) -> Option<f64> {
        let inter = self.0.intersection(&other.0).count();
        let union = self.0.len() + other.0.len() - inter;
        if union == 0 {
            None
        } else {
            Some(inter as f64 / union as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub text: String,
    pub span: Span,
}

/// One worker's story for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryAnnotation {
    pub video_id: String,
    pub worker_id: String,
    pub sentences: Vec<AnnotatedSentence>,
}

/// Collection rules for stories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRules {
    pub min_sentences: usize,
    pub min_words: usize,
}

impl Default for AnnotationRules {
    fn default() -> Self {
        AnnotationRules {
            min_sentences: 8,
            min_words: 6,
        }
    }
}

impl StoryAnnotation {
    pub fn spans(&self) -> Vec<Span> {
        self.sentences.iter().map(|s| s.span).collect()
    }

    pub fn validate(&self, num_frames: usize, rules: &AnnotationRules) -> Result<()> {
        let who = format!("story of worker {} for video {}", self.worker_id, self.video_id);
        if self.sentences.len() < rules.min_sentences {
            return Err(Error::validation(
                format!("{who}: sentences"),
                format!("{} sentences, at least {} required", self.sentences.len(), rules.min_sentences),
            ));
        }
        let mut last_start = 0;
        for (i, s) in self.sentences.iter().enumerate() {
            let words = tokenize(&s.text).len();
            if words < rules.min_words {
                return Err(Error::validation(
                    format!("{who}: sentences[{i}].text"),
                    format!("{words} words, at least {} required", rules.min_words),
                ));
            }
            s.span
                .check_within(num_frames)
                .map_err(|m| Error::validation(format!("{who}: sentences[{i}].span"), m))?;
            if s.span.start < last_start {
                return Err(Error::validation(
                    format!("{who}: sentences[{i}].span"),
                    format!("start {} precedes previous start {last_start}", s.span.start),
                ));
            }
            last_start = s.span.start;
        }
        Ok(())
    }
}

/// `videos.jsonl` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub category: Category,
    pub fps: f64,
    /// Relative to the dataset directory.
    pub features: PathBuf,
}

/// `annotations.jsonl` sentence; spans given either in sampled frames or in
/// seconds of source video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawSentence {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    end: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start_sec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    end_sec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawAnnotation {
    video_id: String,
    worker_id: String,
    sentences: Vec<RawSentence>,
}

/// Converts a second-based span to sampled-frame units.
pub fn seconds_to_span(start_sec: f64, end_sec: f64, fps: f64) -> Span {
    let start = (start_sec * fps / FRAME_STRIDE).floor().max(0.0) as usize;
    let end = ((end_sec * fps / FRAME_STRIDE).ceil().max(0.0) as usize).max(start + 1);
    Span { start, end }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    pub annotations: Vec<StoryAnnotation>,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn annotations_for<'a>(&'a self, video_id: &'a str) -> impl Iterator<Item = &'a StoryAnnotation> + 'a {
        self.annotations.iter().filter(move |a| a.video_id == video_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.id.clone()).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(VideoRecord::feature_dim)
    }

    /// Every type invariant: unique ids, one feature width, annotations that
    /// reference known videos and follow `rules`.
    pub fn validate(&self, rules: &AnnotationRules) -> Result<()> {
        let mut frames = HashMap::new();
        let dim = self.feature_dim();
        for v in &self.videos {
            if frames.insert(v.id.as_str(), v.num_frames()).is_some() {
                return Err(Error::validation(format!("video {}", v.id), "duplicate id"));
            }
            if v.num_frames() == 0 {
                return Err(Error::validation(format!("video {}: frame_features", v.id), "no frames"));
            }
            if Some(v.feature_dim()) != dim {
                return Err(Error::validation(
                    format!("video {}: frame_features", v.id),
                    format!("feature width {} differs from dataset width {:?}", v.feature_dim(), dim),
                ));
            }
            if !(v.fps > 0.0) {
                return Err(Error::validation(
                    format!("video {}: fps", v.id),
                    format!("{} is not positive", v.fps),
                ));
            }
        }
        for a in &self.annotations {
            let n = *frames
                .get(a.video_id.as_str())
                .ok_or_else(|| Error::UnknownId(format!("annotation refers to unknown video {}", a.video_id)))?;
            a.validate(n, rules)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
        let mut vids = Vec::new();
        for v in &self.videos {
            let rel = PathBuf::from("features").join(format!("{}.vsf", v.id));
            features::write_features(&dir.join(&rel), &v.frames)?;
            vids.push(VideoEntry {
                id: v.id.clone(),
                category: v.category,
                fps: v.fps,
                features: rel,
            });
        }
        write_jsonl(&dir.join("videos.jsonl"), &vids)?;
        let raw: Vec<RawAnnotation> = self
            .annotations
            .iter()
            .map(|a| RawAnnotation {
                video_id: a.video_id.clone(),
                worker_id: a.worker_id.clone(),
                sentences: a
                    .sentences
                    .iter()
                    .map(|s| RawSentence {
                        text: s.text.clone(),
                        start: Some(s.span.start),
                        end: Some(s.span.end),
                        start_sec: None,
                        end_sec: None,
                    })
                    .collect(),
            })
            .collect();
        write_jsonl(&dir.join("annotations.jsonl"), &raw)
    }

    /// Loads and validates a dataset directory.
    pub fn load(dir: &Path, rules: &AnnotationRules) -> Result<Self> {
        let entries: Vec<VideoEntry> = read_jsonl(&dir.join("videos.jsonl"))?;
        let mut videos = Vec::with_capacity(entries.len());
        for e in entries {
            let frames = features::read_features(&dir.join(&e.features))
                .map_err(|err| Error::validation(format!("video {}: features", e.id), err.to_string()))?;
            videos.push(VideoRecord {
                id: e.id,
                category: e.category,
                fps: e.fps,
                frames,
            });
        }
        let fps: HashMap<String, f64> = videos.iter().map(|v| (v.id.clone(), v.fps)).collect();
        let raw: Vec<RawAnnotation> = read_jsonl(&dir.join("annotations.jsonl"))?;
        let mut annotations = Vec::with_capacity(raw.len());
        for (line, a) in raw.into_iter().enumerate() {
            let rate = *fps
                .get(&a.video_id)
                .ok_or_else(|| Error::UnknownId(format!("annotations.jsonl line {}: video {}", line + 1, a.video_id)))?;
            let mut sentences = Vec::with_capacity(a.sentences.len());
            for (i, s) in a.sentences.into_iter().enumerate() {
                let span = match (s.start, s.end, s.start_sec, s.end_sec) {
                    (Some(st), Some(en), _, _) => Span::new(st, en),
                    (None, None, Some(st), Some(en)) => seconds_to_span(st, en, rate),
                    _ => {
                        return Err(Error::validation(
                            format!("annotations.jsonl line {} sentences[{i}]", line + 1),
                            "needs start/end or start_sec/end_sec",
                        ))
                    }
                };
                sentences.push(AnnotatedSentence { text: s.text, span });
            }
            annotations.push(StoryAnnotation {
                video_id: a.video_id,
                worker_id: a.worker_id,
                sentences,
            });
        }
        let ds = Dataset { videos, annotations };
        ds.validate(rules)?;
        Ok(ds)
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(start: usize, end: usize) -> AnnotatedSentence {
        AnnotatedSentence {
            text: "the family gathers around the table".into(),
            span: Span::new(start, end),
        }
    }

    fn story(n: usize) -> StoryAnnotation {
        StoryAnnotation {
            video_id: "v0".into(),
            worker_id: "w0".into(),
            sentences: (0..n).map(|i| sentence(i, i + 2)).collect(),
        }
    }

    #[test]
    fn annotation_rules() {
        let rules = AnnotationRules::default();
        story(8).validate(20, &rules).unwrap();
        let err = story(7).validate(20, &rules).unwrap_err();
        assert!(err.to_string().contains("sentences"), "{err}");
        let mut short = story(8);
        short.sentences[3].text = "too short".into();
        assert!(short.validate(20, &rules).unwrap_err().to_string().contains("sentences[3].text"));
        let mut oob = story(8);
        oob.sentences[7].span = Span::new(18, 25);
        assert!(oob.validate(20, &rules).is_err());
        let mut order = story(8);
        order.sentences.swap(1, 2);
        assert!(order.validate(20, &rules).is_err());
    }

    #[test]
    fn frame_set_iou() {
        let a = FrameSet::from_spans(&[Span::new(0, 10)]);
        let b = FrameSet::from_spans(&[Span::new(5, 15)]);
        assert!((a.iou(&b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), Some(1.0));
        assert_eq!(a.iou(&FrameSet::from_spans(&[Span::new(20, 30)])), Some(0.0));
        assert_eq!(FrameSet::default().iou(&FrameSet::default()), None);
    }

    #[test]
    fn seconds_conversion() {
        assert_eq!(seconds_to_span(1.0, 2.0, 30.0), Span::new(3, 6));
        assert_eq!(seconds_to_span(0.0, 0.01, 30.0), Span::new(0, 1));
    }
}
