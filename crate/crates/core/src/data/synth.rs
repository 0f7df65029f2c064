//! Synthetic corpora for desk-scale experiments.
//!
//! Every topic owns a Gaussian feature prototype and one sentence. A video is
//! a sequence of topic clips, each `frames_per_clip` frames of
//! `prototype + noise`. Two optional twists:
//!
//! * ambiguity: the second and second-to-last clip of every video show the
//!   same tent frames (bitwise identical across the whole corpus) but are
//!   described as setting up and packing up the tent respectively. Only the
//!   neighbouring clips tell them apart.
//! * planting: unannotated filler segments separate the annotated clips, so
//!   a clip selector earns reward only at known positions.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::features::round_to_f32;
use crate::data::{AnnotatedSentence, AnnotationRules, Category, Dataset, Span, StoryAnnotation, VideoRecord};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::tokenize;
use crate::seeding::stream_rng;

const VERBS: [&str; 8] = ["carry", "open", "admire", "decorate", "share", "wash", "photograph", "wrap"];
const NOUNS: [&str; 8] = ["cake", "gifts", "candles", "tree", "lanterns", "flowers", "table", "music"];
const PLACES: [&str; 4] = ["house", "garden", "lake", "hall"];

const ARRIVE: &str = "the family arrives at the camp site together";
const SET_UP: &str = "the family sets up their tent near the lake";
const PACK_UP: &str = "the family packs up their tent near the lake";
const DEPART: &str = "the family drives home from the camp site";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub clips_per_video: usize,
    pub frames_per_clip: usize,
    /// Distinct ordinary topics; the ambiguity topics come on top.
    pub num_topics: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-frame noise around the prototype.
    pub noise: f64,
    pub annotators: usize,
    /// Maximum shift (in frames) of the extra annotators' spans.
    pub span_jitter: usize,
    pub ambiguous: bool,
    /// Length of the unannotated segments around each clip; 0 disables planting.
    pub filler_frames: usize,
    pub fps: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 8,
            clips_per_video: 6,
            frames_per_clip: 4,
            num_topics: 12,
            feature_dim: 16,
            noise: 0.05,
            annotators: 1,
            span_jitter: 1,
            ambiguous: false,
            filler_frames: 0,
            fps: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_videos == 0 || self.frames_per_clip == 0 || self.feature_dim == 0 || self.annotators == 0 {
            return bad("synthetic corpus needs at least one video, frame, feature dimension and annotator".into());
        }
        if self.clips_per_video == 0 {
            return bad("clips_per_video must be positive".into());
        }
        let free = self.free_slots();
        if self.ambiguous && self.clips_per_video < 4 {
            return bad(format!("ambiguity needs at least 4 clips per video, got {}", self.clips_per_video));
        }
        if self.num_topics < free {
            return bad(format!(
                "{} topics cannot fill {free} distinct clip slots per video",
                self.num_topics
            ));
        }
        if self.num_topics > VERBS.len() * NOUNS.len() {
            return bad(format!("at most {} topics supported", VERBS.len() * NOUNS.len()));
        }
        if !(self.noise >= 0.0) || !(self.fps > 0.0) {
            return bad("noise must be non-negative and fps positive".into());
        }
        if self.span_jitter >= self.frames_per_clip && self.annotators > 1 {
            return bad("span_jitter must be smaller than frames_per_clip".into());
        }
        Ok(())
    }

    fn free_slots(&self) -> usize {
        if self.ambiguous {
            self.clips_per_video.saturating_sub(4)
        } else {
            self.clips_per_video
        }
    }

    /// Annotation rules the generated stories satisfy: the usual rules with
    /// the sentence minimum lowered to the number of clips.
    pub fn rules(&self) -> AnnotationRules {
        let d = AnnotationRules::default();
        AnnotationRules {
            min_sentences: d.min_sentences.min(self.clips_per_video),
            ..d
        }
    }
}

/// An ambiguous clip: identical features elsewhere in the corpus, different
/// target sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousClip {
    pub video_id: String,
    pub clip_index: usize,
    pub span: Span,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub ambiguous: Vec<AmbiguousClip>,
    /// Annotated (reward-bearing) spans per video in planted mode.
    pub planted: BTreeMap<String, Vec<Span>>,
}

fn topic_sentence(t: usize) -> String {
    let verb = VERBS[t % VERBS.len()];
    let noun = NOUNS[(t / VERBS.len()) % NOUNS.len()];
    let place = PLACES[t % PLACES.len()];
    format!("the family will {verb} the {noun} in the {place}")
}

fn prototype(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn noisy_frames(rng: &mut impl Rng, proto: &[f64], n: usize, noise: f64, out: &mut Vec<f64>) {
    for _ in 0..n {
        for &p in proto {
            let e: f64 = StandardNormal.sample(rng);
            out.push(p + noise * e);
        }
    }
}

pub fn synth_corpus(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let c = config;
    let mut proto_rng = stream_rng(seed, "synth-prototypes", 0);
    let topics: Vec<Vec<f64>> = (0..c.num_topics).map(|_| prototype(&mut proto_rng, c.feature_dim)).collect();
    let filler = prototype(&mut proto_rng, c.feature_dim);
    let arrive = prototype(&mut proto_rng, c.feature_dim);
    let depart = prototype(&mut proto_rng, c.feature_dim);
    let tent = prototype(&mut proto_rng, c.feature_dim);
    let mut tent_frames = Vec::new();
    noisy_frames(&mut proto_rng, &tent, c.frames_per_clip, c.noise, &mut tent_frames);

    let mut videos = Vec::with_capacity(c.num_videos);
    let mut annotations = Vec::new();
    let mut ambiguous = Vec::new();
    let mut planted = BTreeMap::new();
    for vi in 0..c.num_videos {
        let id = format!("synth{vi:03}");
        let mut rng = stream_rng(seed, "synth-video", vi as u64);
        let mut order: Vec<usize> = (0..c.num_topics).collect();
        order.shuffle(&mut rng);
        let mut free = order.into_iter().take(c.free_slots());
        let last = c.clips_per_video - 1;

        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(c.clips_per_video);
        let mut texts = Vec::with_capacity(c.clips_per_video);
        let mut cursor = 0;
        for slot in 0..c.clips_per_video {
            if c.filler_frames > 0 {
                noisy_frames(&mut rng, &filler, c.filler_frames, c.noise, &mut data);
                cursor += c.filler_frames;
            }
            let span = Span::new(cursor, cursor + c.frames_per_clip);
            let text = match (c.ambiguous, slot) {
                (true, 0) => {
                    noisy_frames(&mut rng, &arrive, c.frames_per_clip, c.noise, &mut data);
                    ARRIVE.to_owned()
                }
                (true, s) if s == last => {
                    noisy_frames(&mut rng, &depart, c.frames_per_clip, c.noise, &mut data);
                    DEPART.to_owned()
                }
                (true, s) if s == 1 || s + 1 == last => {
                    data.extend_from_slice(&tent_frames);
                    let sentence = if s == 1 { SET_UP } else { PACK_UP }.to_owned();
                    ambiguous.push(AmbiguousClip {
                        video_id: id.clone(),
                        clip_index: s,
                        span,
                        sentence: sentence.clone(),
                    });
                    sentence
                }
                _ => {
                    let t = free.next().expect("slot count validated");
                    noisy_frames(&mut rng, &topics[t], c.frames_per_clip, c.noise, &mut data);
                    topic_sentence(t)
                }
            };
            cursor += c.frames_per_clip;
            spans.push(span);
            texts.push(text);
        }
        if c.filler_frames > 0 {
            noisy_frames(&mut rng, &filler, c.filler_frames, c.noise, &mut data);
            cursor += c.filler_frames;
            planted.insert(id.clone(), spans.clone());
        }
        let mut frames = Matrix::from_vec(cursor, c.feature_dim, data)?;
        round_to_f32(&mut frames);

        for a in 0..c.annotators {
            let sentences = spans
                .iter()
                .zip(&texts)
                .map(|(s, t)| {
                    let span = if a == 0 || c.span_jitter == 0 {
                        *s
                    } else {
                        let j = c.span_jitter as i64;
                        let ds = rng.random_range(-j..=j);
                        let de = rng.random_range(-j..=j);
                        let start = (s.start as i64 + ds).clamp(0, cursor as i64 - 1) as usize;
                        let end = (s.end as i64 + de).clamp(start as i64 + 1, cursor as i64) as usize;
                        Span::new(start, end)
                    };
                    AnnotatedSentence { text: t.clone(), span }
                })
                .collect::<Vec<_>>();
            let mut sentences = sentences;
            sentences.sort_by_key(|s| s.span.start);
            annotations.push(StoryAnnotation {
                video_id: id.clone(),
                worker_id: format!("w{a}"),
                sentences,
            });
        }
        videos.push(VideoRecord {
            id,
            category: if c.ambiguous {
                Category::Camping
            } else {
                Category::ALL[vi % Category::ALL.len()]
            },
            fps: c.fps,
            frames,
        });
    }
    let dataset = Dataset { videos, annotations };
    dataset.validate(&c.rules())?;
    Ok(SynthCorpus {
        config: c.clone(),
        dataset,
        ambiguous,
        planted,
    })
}

impl SynthCorpus {
    /// Every token that occurs in an annotation.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.dataset.annotations {
            for s in &a.sentences {
                seen.extend(tokenize(&s.text).tokens().iter().cloned());
            }
        }
        seen.into_iter().collect()
    }

    /// Best top-1 accuracy any retriever that sees only a clip's own frames
    /// can reach on the ambiguous subset. Clips with bitwise identical
    /// frames must receive the same answer, so for every group of identical
    /// inputs all candidate answers are tried and the best one kept.
    pub fn context_free_ceiling(&self) -> Result<Option<f64>> {
        if self.ambiguous.is_empty() {
            return Ok(None);
        }
        let mut groups: HashMap<Vec<u64>, Vec<&str>> = HashMap::new();
        for a in &self.ambiguous {
            let v = self
                .dataset
                .video(&a.video_id)
                .ok_or_else(|| Error::UnknownId(a.video_id.clone()))?;
            let key = v.clip(a.span)?.as_slice().iter().map(|x| x.to_bits()).collect();
            groups.entry(key).or_default().push(&a.sentence);
        }
        let candidates: std::collections::BTreeSet<&str> = self.ambiguous.iter().map(|a| a.sentence.as_str()).collect();
        let mut correct = 0;
        for targets in groups.values() {
            correct += candidates
                .iter()
                .map(|c| targets.iter().filter(|t| *t == c).count())
                .max()
                .unwrap_or(0);
        }
        Ok(Some(correct as f64 / self.ambiguous.len() as f64))
    }
}
