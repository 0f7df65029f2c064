//! Local clip-sentence embedding: the pairwise ranking loss over isolated
//! clip/sentence pairs and the training loop that minimises it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Span, WordVectorTable};
use crate::error::{Error, Result};
use crate::gru::{encode_sentence, encode_video_clip, encoder_gradients, EncoderBundle, EncoderGradients};
use crate::linalg::{adam_step, cosine_sim, cosine_sim_grad, AdamState, Matrix, ParamSet, Vector, DEFAULT_LEARNING_RATE};
use crate::metrics::tokenize;
use crate::resbrnn::ResBrnnParams;
use crate::seeding::stream_rng;

pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    /// Margin α.
    pub margin: f64,
    /// Weight λ of the sentence-anchored sum.
    pub lambda: f64,
    pub negatives_per_anchor: usize,
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Also update the word-vector table.
    pub fine_tune_words: bool,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            margin: DEFAULT_MARGIN,
            lambda: DEFAULT_LAMBDA,
            negatives_per_anchor: 1,
            epochs: 500,
            learning_rate: DEFAULT_LEARNING_RATE,
            patience: 10,
            seed: 0,
            fine_tune_words: false,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.negatives_per_anchor == 0 {
            return Err(Error::InvalidConfig("negatives_per_anchor must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Training progress of the embedding model. Each phase requires the one
/// before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Untrained,
    Local,
    Global,
}

/// Everything needed to embed clips and sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub encoders: EncoderBundle,
    pub context: ResBrnnParams,
    pub words: WordVectorTable,
    pub phase: Phase,
}

impl EmbeddingModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, words: WordVectorTable, feature_dim: usize, hidden_dim: usize) -> Self {
        let encoders = EncoderBundle::random(rng, words.dim(), feature_dim, hidden_dim);
        let context = ResBrnnParams::random(rng, hidden_dim);
        EmbeddingModel {
            encoders,
            context,
            words,
            phase: Phase::Untrained,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoders.hidden_dim()
    }

    pub fn embed_sentence(&self, text: &str) -> Result<Vector> {
        let tokens = tokenize(text);
        encode_sentence(&self.encoders, &self.words.lookup(tokens.tokens())?)
    }

    pub fn embed_clip(&self, frames: &Matrix) -> Result<Vector> {
        encode_video_clip(&self.encoders, frames)
    }
}

/// Cosine similarity between a sentence and a clip embedding.
pub fn similarity(v: &[f64], x: &[f64]) -> Result<f64> {
    cosine_sim(v, x)
}

/// Positive pairs `(clips[i], sentences[i])` with negatives given as indices
/// into the same lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub clips: Vec<Vector>,
    pub sentences: Vec<Vector>,
    /// Per clip anchor, indices of negative sentences.
    pub sentence_negatives: Vec<Vec<usize>>,
    /// Per sentence anchor, indices of negative clips.
    pub clip_negatives: Vec<Vec<usize>>,
}

impl PairedBatch {
    pub fn new(clips: Vec<Vector>, sentences: Vec<Vector>, negatives: &NegativeSample) -> Result<Self> {
        let b = PairedBatch {
            clips,
            sentences,
            sentence_negatives: negatives.sentence_negatives.clone(),
            clip_negatives: negatives.clip_negatives.clone(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.clips.len();
        if n == 0 {
            return Err(Error::Empty("ranking batch".into()));
        }
        if self.sentences.len() != n || self.sentence_negatives.len() != n || self.clip_negatives.len() != n {
            return Err(Error::dims("PairedBatch", n, self.sentences.len()));
        }
        for (i, (sn, cn)) in self.sentence_negatives.iter().zip(&self.clip_negatives).enumerate() {
            if let Some(&k) = sn.iter().chain(cn).find(|&&k| k == i || k >= n) {
                return Err(Error::validation(
                    format!("negatives of anchor {i}"),
                    format!("invalid negative index {k}"),
                ));
            }
        }
        Ok(())
    }
}

/// The two sums of the ranking loss, before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingTerms {
    /// Clip-anchored hinges over negative sentences.
    pub clip_anchored: f64,
    /// Sentence-anchored hinges over negative clips.
    pub sentence_anchored: f64,
}

impl RankingTerms {
    pub fn total(&self, lambda: f64) -> f64 {
        self.clip_anchored + lambda * self.sentence_anchored
    }
}

/// Loss value and its gradients with respect to every clip and sentence
/// embedding in the batch.
#[derive(Debug, Clone)]
pub struct RankingGrad {
    pub terms: RankingTerms,
    pub loss: f64,
    pub d_clips: Vec<Vector>,
    pub d_sentences: Vec<Vector>,
}

/// Hinge ranking loss with margin `margin` and balance `lambda`, plus its
/// gradient.
pub fn ranking_loss_grad(batch: &PairedBatch, margin: f64, lambda: f64) -> Result<RankingGrad> {
    batch.validate()?;
    let n = batch.len();
    let dim = batch.clips[0].len();
    let mut d_clips = vec![Vector::zeros(dim); n];
    let mut d_sentences = vec![Vector::zeros(dim); n];
    let mut terms = RankingTerms {
        clip_anchored: 0.0,
        sentence_anchored: 0.0,
    };
    for i in 0..n {
        let (x, v) = (&batch.clips[i], &batch.sentences[i]);
        let (s_pos, g_x, g_v) = cosine_sim_grad(x, v)?;
        for &k in &batch.sentence_negatives[i] {
            let (s_neg, gn_x, gn_v) = cosine_sim_grad(x, &batch.sentences[k])?;
            let h = margin - s_pos + s_neg;
            if h > 0.0 {
                terms.clip_anchored += h;
                d_clips[i].axpy(-1.0, &g_x)?;
                d_sentences[i].axpy(-1.0, &g_v)?;
                d_clips[i].axpy(1.0, &gn_x)?;
                d_sentences[k].axpy(1.0, &gn_v)?;
            }
        }
        for &k in &batch.clip_negatives[i] {
            let (s_neg, gn_v, gn_x) = cosine_sim_grad(v, &batch.clips[k])?;
            let h = margin - s_pos + s_neg;
            if h > 0.0 {
                terms.sentence_anchored += h;
                d_clips[i].axpy(-lambda, &g_x)?;
                d_sentences[i].axpy(-lambda, &g_v)?;
                d_sentences[i].axpy(lambda, &gn_v)?;
                d_clips[k].axpy(lambda, &gn_x)?;
            }
        }
    }
    Ok(RankingGrad {
        loss: terms.total(lambda),
        terms,
        d_clips,
        d_sentences,
    })
}

/// Both unweighted sums of the ranking loss.
pub fn ranking_terms(batch: &PairedBatch, margin: f64) -> Result<RankingTerms> {
    Ok(ranking_loss_grad(batch, margin, 1.0)?.terms)
}

pub fn clip_sentence_loss(batch: &PairedBatch, cfg: &RankingConfig) -> Result<f64> {
    Ok(ranking_terms(batch, cfg.margin)?.total(cfg.lambda))
}

/// One annotated story cut into training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryExample {
    pub video_id: String,
    pub clips: Vec<Matrix>,
    pub texts: Vec<String>,
    pub tokens: Vec<Vec<String>>,
    /// Source span of each clip; empty when the clips were not cut from a video.
    pub spans: Vec<Span>,
}

/// Stories from a set of videos. Each annotator's story is one example.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub stories: Vec<StoryExample>,
}

impl TrainingSet {
    pub fn from_dataset(ds: &Dataset, ids: &[String]) -> Result<Self> {
        let mut stories = Vec::new();
        for id in ids {
            let video = ds.video(id).ok_or_else(|| Error::UnknownId(format!("video {id}")))?;
            for a in ds.annotations_for(id) {
                let mut ex = StoryExample {
                    video_id: id.clone(),
                    clips: Vec::with_capacity(a.sentences.len()),
                    texts: Vec::with_capacity(a.sentences.len()),
                    tokens: Vec::with_capacity(a.sentences.len()),
                    spans: Vec::with_capacity(a.sentences.len()),
                };
                for s in &a.sentences {
                    let toks = tokenize(&s.text);
                    if toks.is_empty() {
                        return Err(Error::validation(
                            format!("video {id}"),
                            format!("sentence {:?} has no tokens", s.text),
                        ));
                    }
                    ex.clips.push(video.clip(s.span)?);
                    ex.texts.push(s.text.clone());
                    ex.tokens.push(toks.tokens().to_vec());
                    ex.spans.push(s.span);
                }
                if !ex.clips.is_empty() {
                    stories.push(ex);
                }
            }
        }
        Ok(TrainingSet { stories })
    }

    pub fn num_pairs(&self) -> usize {
        self.stories.iter().map(|s| s.clips.len()).sum()
    }

    /// Story index of every flattened pair.
    pub fn story_of_pair(&self) -> Vec<usize> {
        self.stories
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.clips.len()))
            .collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.stories.iter().flat_map(|s| s.texts.iter().map(String::as_str)).collect()
    }

    pub fn clips(&self) -> Vec<&Matrix> {
        self.stories.iter().flat_map(|s| s.clips.iter()).collect()
    }

    pub fn tokens(&self) -> Vec<&Vec<String>> {
        self.stories.iter().flat_map(|s| s.tokens.iter()).collect()
    }
}

/// Which pairs may serve as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeScope {
    /// Any pair whose sentence text differs from the anchor's.
    OtherPairs,
    /// As above, restricted to pairs from other stories.
    OtherStories,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    pub sentence_negatives: Vec<Vec<usize>>,
    pub clip_negatives: Vec<Vec<usize>>,
}

/// Uniformly draws `per_anchor` negatives (with replacement) for every
/// anchor, deterministically in `(seed, epoch)`.
pub fn sample_negatives(set: &TrainingSet, scope: NegativeScope, per_anchor: usize, epoch: u64, seed: u64) -> Result<NegativeSample> {
    let texts = set.texts();
    let story = set.story_of_pair();
    let n = texts.len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 pairs to sample negatives, got {n}")));
    }
    let mut rng = stream_rng(seed, "negatives", epoch);
    let mut sentence_negatives = Vec::with_capacity(n);
    let mut clip_negatives = Vec::with_capacity(n);
    for i in 0..n {
        let eligible: Vec<usize> = (0..n)
            .filter(|&j| texts[j] != texts[i] && (scope == NegativeScope::OtherPairs || story[j] != story[i]))
            .collect();
        if eligible.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "pair {i} ({:?}) has no eligible negative; the dataset is too small",
                texts[i]
            )));
        }
        let mut draw = || (0..per_anchor).map(|_| eligible[rng.random_range(0..eligible.len())]).collect();
        sentence_negatives.push(draw());
        clip_negatives.push(draw());
    }
    Ok(NegativeSample {
        sentence_negatives,
        clip_negatives,
    })
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: EmbeddingModel,
    pub curve: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

pub(crate) fn word_matrices(words: &WordVectorTable, set: &TrainingSet) -> Result<Vec<Matrix>> {
    set.tokens().into_iter().map(|t| words.lookup(t)).collect()
}

pub(crate) fn clip_matrices(set: &TrainingSet) -> Vec<Matrix> {
    set.clips().into_iter().cloned().collect()
}

/// Loss and encoder gradients of the local ranking loss on one set.
pub fn local_gradients(
    model: &EmbeddingModel,
    set: &TrainingSet,
    negatives: &NegativeSample,
    cfg: &RankingConfig,
) -> Result<EncoderGradients> {
    let sentences = word_matrices(&model.words, set)?;
    let clips = clip_matrices(set);
    encoder_gradients(&model.encoders, &sentences, &clips, |v, x| {
        let batch = PairedBatch::new(x.to_vec(), v.to_vec(), negatives)?;
        let g = ranking_loss_grad(&batch, cfg.margin, cfg.lambda)?;
        Ok((g.loss, g.d_sentences, g.d_clips))
    })
}

/// Adds per-token input gradients into a gradient buffer shaped like the
/// word table. Out-of-vocabulary tokens have no trainable row.
pub(crate) fn accumulate_word_grads(words: &WordVectorTable, set: &TrainingSet, sentence_inputs: &[Vec<Vector>], out: &mut [f64]) {
    let dim = words.dim();
    for (tokens, grads) in set.tokens().into_iter().zip(sentence_inputs) {
        for (tok, g) in tokens.iter().zip(grads) {
            if let Some(r) = words.id(tok) {
                for (o, gi) in out[r * dim..(r + 1) * dim].iter_mut().zip(g.iter()) {
                    *o += gi;
                }
            }
        }
    }
}

/// Optimiser state for a model: encoders always, words when fine-tuned.
pub(crate) struct ModelOptimizer {
    pub encoders: AdamState,
    pub words: Option<AdamState>,
}

impl ModelOptimizer {
    pub fn new(model: &EmbeddingModel, fine_tune_words: bool) -> Self {
        ModelOptimizer {
            encoders: AdamState::new(model.encoders.num_params()),
            words: fine_tune_words.then(|| AdamState::new(model.words.vectors().as_slice().len())),
        }
    }

    pub fn step_words(&mut self, model: &mut EmbeddingModel, set: &TrainingSet, sentence_inputs: &[Vec<Vector>], lr: f64) -> Result<()> {
        if let Some(state) = &mut self.words {
            let mut g = vec![0.0; model.words.vectors().as_slice().len()];
            accumulate_word_grads(&model.words, set, sentence_inputs, &mut g);
            adam_step(model.words.vectors_mut().as_mut_slice(), &g, state, lr)?;
        }
        Ok(())
    }
}

pub(crate) fn adam_on<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState, lr: f64) -> Result<()> {
    let mut flat = params.to_flat();
    adam_step(&mut flat, &grads.to_flat(), state, lr)?;
    params.set_flat(&flat)
}

/// Early-stopping bookkeeping shared by both embedding phases.
pub(crate) struct EarlyStopping {
    patience: usize,
    best: f64,
    since: usize,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            since: 0,
            best_epoch: 0,
        }
    }

    /// Records a validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        let improved = val < self.best;
        if improved {
            self.best = val;
            self.since = 0;
            self.best_epoch = epoch;
        } else {
            self.since += 1;
        }
        (improved, self.since >= self.patience)
    }
}

/// Minimises the local ranking loss with full-batch ADAM, resampling
/// negatives each epoch, and returns the parameters with the lowest
/// validation loss.
pub fn train_local(model: &EmbeddingModel, train: &TrainingSet, val: &TrainingSet, cfg: &RankingConfig) -> Result<TrainingOutcome> {
    cfg.validate()?;
    model.encoders.validate()?;
    let val_neg = sample_negatives(val, NegativeScope::OtherPairs, cfg.negatives_per_anchor, 0, cfg.seed ^ 0x5eed_0001)?;
    let mut current = model.clone();
    let mut best = model.clone();
    let mut opt = ModelOptimizer::new(model, cfg.fine_tune_words);
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut curve = Vec::new();
    for epoch in 1..=cfg.epochs {
        let neg = sample_negatives(train, NegativeScope::OtherPairs, cfg.negatives_per_anchor, epoch as u64, cfg.seed)?;
        let g = local_gradients(&current, train, &neg, cfg)?;
        adam_on(&mut current.encoders, &g.params, &mut opt.encoders, cfg.learning_rate)?;
        opt.step_words(&mut current, train, &g.sentence_inputs, cfg.learning_rate)?;
        let val_loss = local_gradients(&current, val, &val_neg, cfg)?.loss;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        curve.push(EpochRecord {
            epoch,
            train_loss: g.loss,
            val_loss,
        });
        let (improved, done) = stop.observe(epoch, val_loss);
        if improved {
            best = current.clone();
        }
        if done {
            break;
        }
    }
    best.phase = best.phase.max(Phase::Local);
    Ok(TrainingOutcome {
        model: best,
        curve,
        best_epoch: stop.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthConfig};
    use crate::linalg::{finite_diff_grad, finite_diff_grad_5pt, max_relative_error};
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vector {
        Vector::from_vec(v.to_vec())
    }

    /// Two orthonormal-ish vectors with a prescribed cosine.
    fn with_cos(c: f64) -> Vector {
        unit(&[c, (1.0 - c * c).sqrt()])
    }

    #[test]
    fn similarity_cases() {
        assert!((similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hand_evaluated_example() {
        // anchor x = e1; s(x, v) = 0.5, s(x, v_k) = 0.6, and symmetrically
        // s(v, x_k) arranged to exceed s(v, x) by 0.1.
        let x = unit(&[1.0, 0.0]);
        let v = with_cos(0.5);
        let vk = with_cos(0.6);
        // x_k chosen so that cos(v, x_k) = 0.6: rotate v by acos(0.6).
        let th = 0.5f64.acos() + 0.6f64.acos();
        let xk = unit(&[th.cos(), th.sin()]);
        assert!((cosine_sim(&v, &xk).unwrap() - 0.6).abs() < 1e-12);
        // batch: pair 0 = (x, v), pair 1 = (x_k, v_k)
        let batch = PairedBatch {
            clips: vec![x, xk],
            sentences: vec![v, vk],
            sentence_negatives: vec![vec![1], vec![]],
            clip_negatives: vec![vec![1], vec![]],
        };
        let loss = clip_sentence_loss(&batch, &RankingConfig::default()).unwrap();
        assert!((loss - 0.3).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn inactive_hinges_give_zero() {
        let batch = PairedBatch {
            clips: vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
            sentences: vec![unit(&[1.0, 0.1]), unit(&[0.1, 1.0])],
            sentence_negatives: vec![vec![1], vec![0]],
            clip_negatives: vec![vec![1], vec![0]],
        };
        let g = ranking_loss_grad(&batch, 0.1, 0.5).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.d_clips.iter().chain(&g.d_sentences).all(|d| d.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn negative_equal_to_anchor_rejected() {
        let b = PairedBatch {
            clips: vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
            sentences: vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
            sentence_negatives: vec![vec![0], vec![0]],
            clip_negatives: vec![vec![1], vec![0]],
        };
        assert!(ranking_loss_grad(&b, 0.1, 0.5).is_err());
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> PairedBatch {
        let clips = (0..n).map(|_| Vector::random_uniform(rng, dim, 1.0)).collect();
        let sentences = (0..n).map(|_| Vector::random_uniform(rng, dim, 1.0)).collect();
        let neg = |rng: &mut ChaCha8Rng, i: usize| {
            (0..2)
                .map(|_| {
                    let k = rng.random_range(0..n - 1);
                    if k >= i {
                        k + 1
                    } else {
                        k
                    }
                })
                .collect()
        };
        let sentence_negatives = (0..n).map(|i| neg(rng, i)).collect();
        let clip_negatives = (0..n).map(|i| neg(rng, i)).collect();
        PairedBatch {
            clips,
            sentences,
            sentence_negatives,
            clip_negatives,
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 4, 5);
        let g = ranking_loss_grad(&batch, 0.4, 0.5).unwrap();
        let flat: Vec<f64> = batch.clips.iter().chain(&batch.sentences).flat_map(|v| v.iter().copied()).collect();
        let f = |p: &[f64]| {
            let mut b = batch.clone();
            for (i, c) in b.clips.iter_mut().chain(b.sentences.iter_mut()).enumerate() {
                c.copy_from_slice(&p[i * 5..(i + 1) * 5]);
            }
            ranking_loss_grad(&b, 0.4, 0.5).unwrap().loss
        };
        let fd = finite_diff_grad(f, &flat, 1e-6).unwrap();
        let an: Vec<f64> = g.d_clips.iter().chain(&g.d_sentences).flat_map(|v| v.iter().copied()).collect();
        assert!(max_relative_error(&an, &fd) < 1e-5, "{}", max_relative_error(&an, &fd));
    }

    proptest! {
        #[test]
        fn nonnegative_scale_invariant_and_lambda_linear(seed in 0u64..500, s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, 3, 4);
            let t = ranking_terms(&batch, 0.1).unwrap();
            prop_assert!(t.clip_anchored >= 0.0 && t.sentence_anchored >= 0.0);
            let mut scaled = batch.clone();
            scaled.clips[0] = scaled.clips[0].scale(s);
            scaled.sentences[2] = scaled.sentences[2].scale(s);
            let ts = ranking_terms(&scaled, 0.1).unwrap();
            prop_assert!((t.total(0.5) - ts.total(0.5)).abs() < 1e-12);
            let l1 = ranking_loss_grad(&batch, 0.1, 0.5).unwrap().loss;
            let l2 = ranking_loss_grad(&batch, 0.1, 1.0).unwrap().loss;
            prop_assert!(((l2 - t.clip_anchored) - 2.0 * (l1 - t.clip_anchored)).abs() < 1e-12);
        }
    }

    fn tiny_set(seed: u64) -> (EmbeddingModel, TrainingSet) {
        let cfg = SynthConfig {
            num_videos: 2,
            clips_per_video: 4,
            num_topics: 8,
            feature_dim: 6,
            ..SynthConfig::default()
        };
        let corpus = synth_corpus(&cfg, seed).unwrap();
        let words = WordVectorTable::synthetic(&corpus.vocabulary(), 6, seed).unwrap();
        let model = EmbeddingModel::new(&mut ChaCha8Rng::seed_from_u64(seed), words, 6, 8);
        let set = TrainingSet::from_dataset(&corpus.dataset, &corpus.dataset.ids()).unwrap();
        (model, set)
    }

    #[test]
    fn two_pair_negatives_are_forced() {
        let (_, mut set) = tiny_set(1);
        set.stories.truncate(1);
        set.stories[0].clips.truncate(2);
        set.stories[0].texts.truncate(2);
        set.stories[0].tokens.truncate(2);
        let n = sample_negatives(&set, NegativeScope::OtherPairs, 3, 0, 9).unwrap();
        assert_eq!(n.sentence_negatives, vec![vec![1; 3], vec![0; 3]]);
        assert_eq!(n.clip_negatives, vec![vec![1; 3], vec![0; 3]]);
        assert!(sample_negatives(&set, NegativeScope::OtherStories, 1, 0, 9).is_err());
    }

    #[test]
    fn negative_sampling_is_deterministic_and_uniform() {
        let (_, set) = tiny_set(2);
        let a = sample_negatives(&set, NegativeScope::OtherPairs, 1, 4, 7).unwrap();
        assert_eq!(a, sample_negatives(&set, NegativeScope::OtherPairs, 1, 4, 7).unwrap());
        let texts = set.texts();
        let eligible: Vec<usize> = (1..texts.len()).filter(|&j| texts[j] != texts[0]).collect();
        assert!((4..=7).contains(&eligible.len()));
        let mut counts = vec![0usize; texts.len()];
        for e in 0..1000 {
            let s = sample_negatives(&set, NegativeScope::OtherPairs, 1, e, 7).unwrap();
            counts[s.sentence_negatives[0][0]] += 1;
        }
        assert_eq!(counts[0], 0);
        let expect = 1000.0 / eligible.len() as f64;
        let chi2: f64 = eligible.iter().map(|&j| (counts[j] as f64 - expect).powi(2) / expect).sum();
        // at most 6 degrees of freedom; 99.9th percentile for 6 is 22.46
        assert!(chi2 < 22.46, "chi2 = {chi2}");
    }

    #[test]
    fn patience_zero_runs_one_epoch_and_is_deterministic() {
        let (model, set) = tiny_set(3);
        let cfg = RankingConfig {
            patience: 0,
            learning_rate: 0.01,
            ..RankingConfig::default()
        };
        let out = train_local(&model, &set, &set, &cfg).unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(out.model.phase, Phase::Local);
        let cfg = RankingConfig {
            epochs: 5,
            learning_rate: 0.01,
            ..RankingConfig::default()
        };
        let a = train_local(&model, &set, &set, &cfg).unwrap();
        let b = train_local(&model, &set, &set, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        let zero = train_local(&model, &set, &set, &RankingConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(zero.model.encoders, model.encoders);
    }

    #[test]
    fn encoder_gradient_of_local_loss_matches_finite_differences() {
        let (model, set) = tiny_set(4);
        let cfg = RankingConfig {
            margin: 0.5,
            ..RankingConfig::default()
        };
        let neg = sample_negatives(&set, NegativeScope::OtherPairs, 1, 0, 1).unwrap();
        let g = local_gradients(&model, &set, &neg, &cfg).unwrap();
        let theta = model.encoders.to_flat();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.encoders.set_flat(p).unwrap();
            local_gradients(&m, &set, &neg, &cfg).unwrap().loss
        };
        let fd = finite_diff_grad_5pt(f, &theta, 1e-3).unwrap();
        let err = max_relative_error(&g.params.to_flat(), &fd);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn word_fine_tuning_moves_only_used_rows() {
        let (model, set) = tiny_set(5);
        let cfg = RankingConfig {
            epochs: 2,
            patience: 5,
            learning_rate: 0.01,
            fine_tune_words: true,
            ..RankingConfig::default()
        };
        let out = train_local(&model, &set, &set, &cfg).unwrap();
        assert_ne!(out.model.words.vectors(), model.words.vectors());
        let frozen = train_local(
            &model,
            &set,
            &set,
            &RankingConfig {
                fine_tune_words: false,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(frozen.model.words.vectors(), model.words.vectors());
    }
}
