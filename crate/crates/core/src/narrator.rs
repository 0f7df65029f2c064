//! The clip-selecting agent: a candidate gate over frame embeddings, a
//! Bernoulli clip indicator and a Gaussian clip length, trained with
//! REINFORCE against a per-video random-rollout baseline.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{pseudo_gt_clips, Dataset, FrameSet, Span, VideoRecord};
use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::gru::{run_sequence, EncoderBundle, INIT_SCALE};
use crate::linalg::{adam_step, cosine_sim, sigmoid_scalar, AdamState, ParamSet, Vector, DEFAULT_LEARNING_RATE};
use crate::metrics::{cider, tokenize, CorpusIdf, TokenizedText};
use crate::retrieval::{tell_story, SentencePool, Story, DEFAULT_K};
use crate::seeding::stream_rng;

pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DEFAULT_KAPPA: f64 = 40.0;
pub const DEFAULT_SIGMA_L: f64 = 4.0;
pub const INITIAL_CLIP_BIAS: f64 = -0.4;
pub const DEFAULT_BASELINE_ROLLOUTS: usize = 10;
pub const DEFAULT_EPISODES: usize = 8;

/// Which earlier frame the gate compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointerRule {
    /// The last position that passed the gate.
    #[default]
    LastCandidate,
    /// The last position where a clip was actually sampled.
    LastSampled,
}

/// Fixed (non-trained) narrator constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NarratorSettings {
    /// Gate threshold τ.
    pub tau: f64,
    /// Test-time selection threshold ε.
    pub epsilon: f64,
    /// Length scale κ, in sampled frames.
    pub kappa: f64,
    /// Standard deviation of the train-time length noise.
    pub sigma_l: f64,
    pub pointer: PointerRule,
}

impl Default for NarratorSettings {
    fn default() -> Self {
        NarratorSettings {
            tau: DEFAULT_TAU,
            epsilon: DEFAULT_EPSILON,
            kappa: DEFAULT_KAPPA,
            sigma_l: DEFAULT_SIGMA_L,
            pointer: PointerRule::default(),
        }
    }
}

impl NarratorSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > -1.0 && self.tau <= 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (-1, 1], got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        if !(self.kappa > 0.0) || !(self.sigma_l > 0.0) {
            return Err(Error::InvalidConfig("kappa and sigma_l must be positive".into()));
        }
        Ok(())
    }

    /// Largest admissible clip length.
    fn max_len(&self) -> usize {
        (self.kappa.floor() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarratorParams {
    pub w_c: Vector,
    pub b_c: f64,
    pub w_l: Vector,
    pub b_l: f64,
    pub settings: NarratorSettings,
}

impl NarratorParams {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, settings: NarratorSettings) -> Self {
        NarratorParams {
            w_c: Vector::random_uniform(rng, dim, INIT_SCALE),
            b_c: INITIAL_CLIP_BIAS,
            w_l: Vector::random_uniform(rng, dim, INIT_SCALE),
            b_l: 0.0,
            settings,
        }
    }

    pub fn zeros(dim: usize, settings: NarratorSettings) -> Self {
        NarratorParams {
            w_c: Vector::zeros(dim),
            b_c: INITIAL_CLIP_BIAS,
            w_l: Vector::zeros(dim),
            b_l: 0.0,
            settings,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_c.len()
    }

    pub fn zeros_like(&self) -> Self {
        NarratorParams {
            w_c: Vector::zeros(self.dim()),
            b_c: 0.0,
            w_l: Vector::zeros(self.dim()),
            b_l: 0.0,
            settings: self.settings,
        }
    }
}

impl ParamSet for NarratorParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.w_c);
        f(std::slice::from_ref(&self.b_c));
        f(&self.w_l);
        f(std::slice::from_ref(&self.b_l));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.w_c);
        f(std::slice::from_mut(&mut self.b_c));
        f(&mut self.w_l);
        f(std::slice::from_mut(&mut self.b_l));
    }
}

/// 1 when the current frame differs enough from the previous pointer frame.
/// With no previous frame the position is always a candidate.
pub fn candidate_gate(x_n: &[f64], x_p: Option<&[f64]>, tau: f64) -> Result<bool> {
    match x_p {
        None => {
            if x_n.iter().all(|v| *v == 0.0) {
                return Err(Error::ZeroVector("candidate_gate"));
            }
            Ok(true)
        }
        Some(p) => Ok(cosine_sim(x_n, p)? < tau),
    }
}

fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("narrator", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// `max(0, σ(W_c·x) + b_c)`, also capped at 1 so that it stays a
/// probability when `b_c > 0`.
pub fn clip_probability(x: &[f64], p: &NarratorParams) -> Result<f64> {
    Ok((sigmoid_scalar(dot(&p.w_c, x)?) + p.b_c).clamp(0.0, 1.0))
}

/// `κ σ(W_l·x + b_l)`.
pub fn clip_length_mean(x: &[f64], p: &NarratorParams) -> Result<f64> {
    Ok(p.settings.kappa * sigmoid_scalar(dot(&p.w_l, x)? + p.b_l))
}

/// Span of a clip centred at `center`, truncated at the video bounds.
pub fn clip_span(center: usize, length: usize, num_frames: usize) -> Span {
    let start = center as i64 - (length / 2) as i64;
    let end = start + length as i64;
    Span::new(start.max(0) as usize, (end.min(num_frames as i64)) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipProposal {
    pub center: usize,
    pub length: usize,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Train,
    Test,
}

/// One evaluated candidate position.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub position: usize,
    pub input: Vector,
    pub prob: f64,
    pub clip: bool,
    /// Continuous length draw and the mean it was drawn around.
    pub length: Option<(f64, f64)>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    pub decisions: Vec<Decision>,
    pub reward: Option<f64>,
    pub baseline: Option<f64>,
}

impl EpisodeTrace {
    pub fn log_prob(&self) -> f64 {
        self.decisions.iter().map(|d| d.log_prob).sum()
    }

    pub fn candidates(&self) -> usize {
        self.decisions.len()
    }
}

fn gaussian_log_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Scans the video once. Train mode samples indicators and lengths; test
/// mode thresholds the indicator at ε and uses the mean length.
pub fn rollout<R: Rng + ?Sized>(
    params: &NarratorParams,
    frames: &[Vector],
    mode: RolloutMode,
    rng: &mut R,
) -> Result<(Vec<ClipProposal>, EpisodeTrace)> {
    if frames.is_empty() {
        return Err(Error::Empty("rollout over a video without frames".into()));
    }
    let s = &params.settings;
    let n_frames = frames.len();
    let mut pointer: Option<usize> = None;
    let mut proposals = Vec::new();
    let mut trace = EpisodeTrace::default();
    for (n, x) in frames.iter().enumerate() {
        if !candidate_gate(x, pointer.map(|p| frames[p].as_slice()), s.tau)? {
            continue;
        }
        let prob = clip_probability(x, params)?;
        let clip = match mode {
            RolloutMode::Train => rng.random::<f64>() < prob,
            RolloutMode::Test => prob > s.epsilon,
        };
        let mut log_prob = if clip { prob.ln() } else { (1.0 - prob).ln() };
        if matches!(s.pointer, PointerRule::LastCandidate) || clip {
            pointer = Some(n);
        }
        let mut length = None;
        if clip {
            let mean = clip_length_mean(x, params)?;
            let draw = match mode {
                RolloutMode::Train => Normal::new(mean, s.sigma_l)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?
                    .sample(rng),
                RolloutMode::Test => mean,
            };
            log_prob += gaussian_log_pdf(draw, mean, s.sigma_l);
            let l = (draw.round().max(1.0) as usize).min(s.max_len());
            proposals.push(ClipProposal {
                center: n,
                length: l,
                span: clip_span(n, l, n_frames),
            });
            length = Some((draw, mean));
        }
        if mode == RolloutMode::Train && !log_prob.is_finite() {
            return Err(Error::NonFinite(format!("log-probability at position {n}")));
        }
        trace.decisions.push(Decision {
            position: n,
            input: x.clone(),
            prob,
            clip,
            length,
            log_prob,
        });
    }
    Ok((proposals, trace))
}

/// Gradient of the episode's log-probability with respect to the trainable
/// parameters. The length noise is fixed, so only the mean is
/// differentiated.
pub fn log_prob_gradient(params: &NarratorParams, trace: &EpisodeTrace) -> Result<NarratorParams> {
    let mut g = params.zeros_like();
    let s = &params.settings;
    for d in &trace.decisions {
        let x = &d.input;
        let sc = sigmoid_scalar(dot(&params.w_c, x)?);
        let raw = sc + params.b_c;
        // the clamp is flat outside (0, 1)
        if raw > 0.0 && raw < 1.0 {
            let dlogp_df = if d.clip { 1.0 / d.prob } else { -1.0 / (1.0 - d.prob) };
            g.w_c.axpy(dlogp_df * sc * (1.0 - sc), x)?;
            g.b_c += dlogp_df;
        }
        if let Some((draw, mean)) = d.length {
            let sl = sigmoid_scalar(dot(&params.w_l, x)? + params.b_l);
            let dlogp_da = (draw - mean) / (s.sigma_l * s.sigma_l) * s.kappa * sl * (1.0 - sl);
            g.w_l.axpy(dlogp_da, x)?;
            g.b_l += dlogp_da;
        }
    }
    if !g.all_finite() {
        return Err(Error::NonFinite("log-probability gradient".into()));
    }
    Ok(g)
}

/// `(1/M) Σ_i (R_i - b_i) ∇ log π(episode_i)`: an estimate of the gradient
/// of expected reward (an ascent direction).
pub fn reinforce_update(traces: &[EpisodeTrace], params: &NarratorParams) -> Result<NarratorParams> {
    if traces.is_empty() {
        return Err(Error::Empty("no episodes".into()));
    }
    let mut total = params.zeros_like().to_flat();
    for (i, t) in traces.iter().enumerate() {
        let (Some(r), Some(b)) = (t.reward, t.baseline) else {
            return Err(Error::validation(format!("episode {i}"), "reward and baseline must be set"));
        };
        let adv = r - b;
        if adv == 0.0 {
            continue;
        }
        for (acc, gi) in total.iter_mut().zip(log_prob_gradient(params, t)?.to_flat()) {
            *acc += adv * gi;
        }
    }
    let m = traces.len() as f64;
    total.iter_mut().for_each(|v| *v /= m);
    let mut out = params.zeros_like();
    out.set_flat(&total)?;
    Ok(out)
}

/// IoU of the frames covered by the proposals and by the annotations.
pub fn iou_reward(proposals: &[ClipProposal], annotated: &[Span]) -> Result<f64> {
    let spans: Vec<Span> = proposals.iter().map(|p| p.span).collect();
    FrameSet::from_spans(&spans)
        .iou(&FrameSet::from_spans(annotated))
        .ok_or_else(|| Error::Empty("both proposal and annotation frame sets are empty".into()))
}

/// Hidden states of the video encoder over the whole video: the narrator's
/// per-frame inputs.
pub fn frame_embeddings(encoders: &EncoderBundle, video: &VideoRecord) -> Result<Vec<Vector>> {
    let trace = run_sequence(&encoders.video, video.frames.row_iter(), &format!("video encoder on {}", video.id))?;
    Ok((0..trace.len()).map(|t| trace.hidden(t).clone()).collect())
}

/// Random clip set: as many clips as the references have sentences on
/// average, centres uniform without replacement, lengths uniform in
/// `[1, κ]`.
pub fn random_clips<R: Rng + ?Sized>(rng: &mut R, num_frames: usize, count: usize, settings: &NarratorSettings) -> Vec<ClipProposal> {
    let count = count.clamp(1, num_frames);
    let mut centers = sample(rng, num_frames, count).into_vec();
    centers.sort_unstable();
    centers
        .into_iter()
        .map(|c| {
            let l = rng.random_range(1..=settings.max_len());
            ClipProposal {
                center: c,
                length: l,
                span: clip_span(c, l, num_frames),
            }
        })
        .collect()
}

/// Evenly spaced clips of a fixed length.
pub fn uniform_clips(num_frames: usize, count: usize, length: usize) -> Vec<ClipProposal> {
    let count = count.clamp(1, num_frames);
    (0..count)
        .map(|i| {
            let c = ((2 * i + 1) * num_frames) / (2 * count);
            ClipProposal {
                center: c,
                length: length.max(1),
                span: clip_span(c, length.max(1), num_frames),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Cider,
    Iou,
}

/// A video prepared for narrator training: frame embeddings plus the
/// material needed to score a proposal set.
#[derive(Debug, Clone)]
pub struct NarratorVideo {
    pub video: VideoRecord,
    pub frames: Vec<Vector>,
    pub references: Vec<Vec<TokenizedText>>,
    /// Spans used for the IoU reward (pseudo ground truth).
    pub spans: Vec<Span>,
}

impl NarratorVideo {
    pub fn mean_reference_len(&self) -> usize {
        if self.references.is_empty() {
            return self.spans.len().max(1);
        }
        let total: usize = self.references.iter().map(|r| r.len()).sum();
        ((total as f64 / self.references.len() as f64).round() as usize).max(1)
    }
}

/// Tokenized reference stories of one video, one per annotator.
pub fn reference_stories(dataset: &Dataset, video_id: &str) -> Vec<Vec<TokenizedText>> {
    dataset
        .annotations_for(video_id)
        .map(|a| a.sentences.iter().map(|s| tokenize(&s.text)).collect())
        .collect()
}

/// CIDEr document statistics over the concatenated reference stories of
/// `ids`.
pub fn story_idf(dataset: &Dataset, ids: &[String]) -> Result<CorpusIdf> {
    let docs: Vec<TokenizedText> = ids
        .iter()
        .flat_map(|id| reference_stories(dataset, id))
        .map(|r| TokenizedText::concat(&r))
        .collect();
    CorpusIdf::build(&docs)
}

impl NarratorVideo {
    /// `spans` overrides the IoU target; by default the pseudo ground truth
    /// of the video's annotations is used.
    pub fn from_dataset(encoders: &EncoderBundle, dataset: &Dataset, video_id: &str, spans: Option<Vec<Span>>) -> Result<Self> {
        let video = dataset
            .video(video_id)
            .ok_or_else(|| Error::UnknownId(video_id.to_owned()))?
            .clone();
        let spans = match spans {
            Some(s) => s,
            None => {
                let anns: Vec<_> = dataset.annotations_for(video_id).cloned().collect();
                if anns.is_empty() {
                    Vec::new()
                } else {
                    pseudo_gt_clips(&anns)?.spans
                }
            }
        };
        Ok(NarratorVideo {
            frames: frame_embeddings(encoders, &video)?,
            references: reference_stories(dataset, video_id),
            spans,
            video,
        })
    }
}

/// Turns proposals into a scalar reward.
pub struct RewardEnv<'a> {
    pub model: &'a EmbeddingModel,
    pub pool: &'a SentencePool,
    pub idf: &'a CorpusIdf,
    pub k: usize,
    pub mode: RewardMode,
}

impl RewardEnv<'_> {
    pub fn story(&self, v: &NarratorVideo, proposals: &[ClipProposal]) -> Result<Story> {
        let spans: Vec<Span> = proposals.iter().map(|p| p.span).collect();
        tell_story(self.model, self.pool, &v.video, &spans, self.k)
    }

    pub fn reward(&self, v: &NarratorVideo, proposals: &[ClipProposal]) -> Result<f64> {
        match self.mode {
            RewardMode::Iou => {
                if v.spans.is_empty() {
                    return Err(Error::Empty(format!("video {} has no spans for the IoU reward", v.video.id)));
                }
                iou_reward(proposals, &v.spans)
            }
            RewardMode::Cider => {
                if v.references.is_empty() {
                    return Err(Error::Empty(format!("video {} has no reference stories", v.video.id)));
                }
                // no duplicate-free story exists: scored as a failed story
                if proposals.is_empty() || proposals.len() > self.pool.len() {
                    return Ok(0.0);
                }
                let story = self.story(v, proposals)?;
                let refs: Vec<TokenizedText> = v.references.iter().map(TokenizedText::concat).collect();
                cider(&TokenizedText::concat(&story.tokens()), &refs, self.idf)
            }
        }
    }
}

/// Mean reward of `k` random clip sets.
pub fn baseline_reward<R: Rng + ?Sized>(
    env: &RewardEnv,
    v: &NarratorVideo,
    k: usize,
    settings: &NarratorSettings,
    rng: &mut R,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("baseline needs at least one rollout".into()));
    }
    if env.pool.is_empty() {
        return Err(Error::Empty("sentence pool".into()));
    }
    let mut total = 0.0;
    for _ in 0..k {
        let clips = random_clips(rng, v.frames.len(), v.mean_reference_len(), settings);
        total += env.reward(v, &clips)?;
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarratorTrainConfig {
    pub epochs: usize,
    /// Episodes per update M.
    pub episodes: usize,
    /// Random rollouts per baseline K.
    pub baseline_rollouts: usize,
    pub learning_rate: f64,
    pub k: usize,
    pub mode: RewardMode,
    pub seed: u64,
}

impl Default for NarratorTrainConfig {
    fn default() -> Self {
        NarratorTrainConfig {
            epochs: 50,
            episodes: DEFAULT_EPISODES,
            baseline_rollouts: DEFAULT_BASELINE_ROLLOUTS,
            learning_rate: DEFAULT_LEARNING_RATE,
            k: DEFAULT_K,
            mode: RewardMode::Cider,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub epoch: usize,
    pub train_reward: f64,
    pub test_reward: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone)]
pub struct NarratorOutcome {
    pub params: NarratorParams,
    pub curve: Vec<RewardRecord>,
    pub baselines: BTreeMap<String, f64>,
}

/// Mean test-mode reward over `videos`.
pub fn test_reward(env: &RewardEnv, params: &NarratorParams, videos: &[NarratorVideo]) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Empty("no videos".into()));
    }
    let mut total = 0.0;
    for v in videos {
        // test mode draws nothing from the generator
        let (p, _) = rollout(params, &v.frames, RolloutMode::Test, &mut stream_rng(0, "unused", 0))?;
        total += env.reward(v, &p)?;
    }
    Ok(total / videos.len() as f64)
}

/// Per-video baselines from `K` random rollouts each. They do not depend on
/// the policy, so they are computed once.
pub fn video_baselines(
    env: &RewardEnv,
    videos: &[NarratorVideo],
    cfg: &NarratorTrainConfig,
    settings: &NarratorSettings,
) -> Result<BTreeMap<String, f64>> {
    videos
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = stream_rng(cfg.seed, "narrator-baseline", i as u64);
            Ok((
                v.video.id.clone(),
                baseline_reward(env, v, cfg.baseline_rollouts, settings, &mut rng)?,
            ))
        })
        .collect()
}

/// REINFORCE with a per-video baseline; one ADAM ascent step per video per
/// epoch, each from `M` sampled episodes.
pub fn train_narrator(
    params: &NarratorParams,
    videos: &[NarratorVideo],
    env: &RewardEnv,
    cfg: &NarratorTrainConfig,
) -> Result<NarratorOutcome> {
    params.settings.validate()?;
    if cfg.episodes == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "narrator training needs episodes >= 1 and a positive learning rate".into(),
        ));
    }
    if env.model.phase < crate::embedding::Phase::Global {
        return Err(Error::PhaseOrder(
            "narrator training requires a globally trained embedding model".into(),
        ));
    }
    if videos.is_empty() {
        return Err(Error::Empty("no training videos".into()));
    }
    let baselines = video_baselines(env, videos, cfg, &params.settings)?;
    let mean_baseline = baselines.values().sum::<f64>() / baselines.len() as f64;
    let mut current = params.clone();
    let mut state = AdamState::new(current.num_params());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = stream_rng(cfg.seed, "narrator-episodes", epoch as u64);
        let mut reward_sum = 0.0;
        for v in videos {
            let b = baselines[&v.video.id];
            let mut traces = Vec::with_capacity(cfg.episodes);
            for _ in 0..cfg.episodes {
                let (p, mut t) = rollout(&current, &v.frames, RolloutMode::Train, &mut rng)?;
                let r = env.reward(v, &p)?;
                reward_sum += r;
                t.reward = Some(r);
                t.baseline = Some(b);
                traces.push(t);
            }
            let g = reinforce_update(&traces, &current)?;
            let descent: Vec<f64> = g.to_flat().iter().map(|x| -x).collect();
            let mut flat = current.to_flat();
            adam_step(&mut flat, &descent, &mut state, cfg.learning_rate)?;
            current.set_flat(&flat)?;
        }
        curve.push(RewardRecord {
            epoch,
            train_reward: reward_sum / (videos.len() * cfg.episodes) as f64,
            test_reward: test_reward(env, &current, videos)?,
            baseline: mean_baseline,
        });
    }
    Ok(NarratorOutcome {
        params: current,
        curve,
        baselines,
    })
}

pub fn write_reward_csv<W: Write>(out: W, curve: &[RewardRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Output of the full test-time pipeline for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStory {
    pub proposals: Vec<ClipProposal>,
    pub story: Story,
    /// Set when the narrator selected no clips.
    pub warning: Option<String>,
}

/// Test-mode rollout, context embedding of the selected clips, then kNN
/// retrieval.
pub fn generate_story(
    model: &EmbeddingModel,
    narrator: &NarratorParams,
    pool: &SentencePool,
    video: &VideoRecord,
    k: usize,
) -> Result<GeneratedStory> {
    if model.phase < crate::embedding::Phase::Global {
        return Err(Error::PhaseOrder(
            "story generation requires a globally trained embedding model".into(),
        ));
    }
    let frames = frame_embeddings(&model.encoders, video)?;
    if frames.first().map(|f| f.len()) != Some(narrator.dim()) {
        return Err(Error::dims("generate_story", narrator.dim(), frames.first().map_or(0, |f| f.len())));
    }
    let (proposals, _) = rollout(narrator, &frames, RolloutMode::Test, &mut stream_rng(0, "unused", 0))?;
    if proposals.is_empty() {
        return Ok(GeneratedStory {
            proposals,
            story: Story { entries: Vec::new() },
            warning: Some(format!("narrator selected no clips for video {}", video.id)),
        });
    }
    let spans: Vec<Span> = proposals.iter().map(|p| p.span).collect();
    let story = tell_story(model, pool, video, &spans, k)?;
    Ok(GeneratedStory {
        proposals,
        story,
        warning: None,
    })
}
