//! Residual bidirectional GRU over a story's clip embeddings, and the
//! video-story ranking loss used to train it jointly with the encoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Span;
use crate::data::VideoRecord;
use crate::embedding::{
    adam_on, clip_matrices, ranking_loss_grad, sample_negatives, word_matrices, EarlyStopping, EmbeddingModel, EpochRecord, ModelOptimizer,
    NegativeSample, NegativeScope, PairedBatch, Phase, TrainingOutcome, TrainingSet,
};
use crate::error::{Error, Result};
use crate::gru::{
    backward_sequence, encode_video_clip, encoder_gradients, run_sequence, EncoderBundle, GruParams, SequenceTrace, INIT_SCALE,
};
use crate::linalg::{AdamState, Matrix, ParamSet, Vector, DEFAULT_LEARNING_RATE};

pub const DEFAULT_STORY_MARGIN: f64 = 0.2;

/// One GRU shared by the forward and the backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBrnnParams {
    pub gru: GruParams,
}

impl ResBrnnParams {
    pub fn zeros(dim: usize) -> Self {
        ResBrnnParams {
            gru: GruParams::zeros(dim, dim),
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        ResBrnnParams {
            gru: GruParams::random(rng, dim, dim, INIT_SCALE),
        }
    }

    pub fn dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    pub fn zeros_like(&self) -> Self {
        ResBrnnParams {
            gru: self.gru.zeros_like(),
        }
    }
}

impl ParamSet for ResBrnnParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.gru.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.gru.visit_mut(f);
    }
}

/// Forward and backward traces kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ResBrnnTrace {
    forward: SequenceTrace,
    backward: SequenceTrace,
    pub outputs: Vec<Vector>,
}

pub fn resbrnn_trace(p: &ResBrnnParams, xs: &[Vector]) -> Result<ResBrnnTrace> {
    if xs.is_empty() {
        return Err(Error::Empty("resbrnn input sequence".into()));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != p.dim()) {
        return Err(Error::dims("resbrnn_forward", p.dim(), x.len()));
    }
    let forward = run_sequence(&p.gru, xs.iter().map(|x| x.as_slice()), "resbrnn forward pass")?;
    let backward = run_sequence(&p.gru, xs.iter().rev().map(|x| x.as_slice()), "resbrnn backward pass")?;
    let n = xs.len();
    let outputs = (0..n)
        .map(|t| {
            // summing the two passes first keeps reversal symmetry exact
            let ctx = forward.hidden(t).add(backward.hidden(n - 1 - t))?;
            xs[t].add(&ctx)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResBrnnTrace {
        forward,
        backward,
        outputs,
    })
}

/// `m_t = x_t + h^f_t + h^b_t`.
pub fn resbrnn_forward(p: &ResBrnnParams, xs: &[Vector]) -> Result<Vec<Vector>> {
    Ok(resbrnn_trace(p, xs)?.outputs)
}

/// Given dL/dm_t, accumulates parameter gradients into `grads` and returns
/// dL/dx_t.
pub fn resbrnn_backward(p: &ResBrnnParams, trace: &ResBrnnTrace, dm: &[Vector], grads: &mut ResBrnnParams) -> Result<Vec<Vector>> {
    let n = trace.outputs.len();
    if dm.len() != n {
        return Err(Error::dims("resbrnn_backward", n, dm.len()));
    }
    let rev: Vec<Vector> = dm.iter().rev().cloned().collect();
    let dxf = backward_sequence(&p.gru, &trace.forward, dm, &mut grads.gru, "resbrnn forward pass")?;
    let dxb = backward_sequence(&p.gru, &trace.backward, &rev, &mut grads.gru, "resbrnn backward pass")?;
    (0..n)
        .map(|t| {
            let mut d = dm[t].clone();
            d.axpy(1.0, &dxf[t])?;
            d.axpy(1.0, &dxb[n - 1 - t])?;
            Ok(d)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRankingConfig {
    /// Margin β, larger than the local margin.
    pub margin: f64,
    pub lambda: f64,
    pub negatives_per_anchor: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    pub fine_tune_words: bool,
}

impl Default for GlobalRankingConfig {
    fn default() -> Self {
        GlobalRankingConfig {
            margin: DEFAULT_STORY_MARGIN,
            lambda: crate::embedding::DEFAULT_LAMBDA,
            negatives_per_anchor: 1,
            epochs: 500,
            learning_rate: DEFAULT_LEARNING_RATE,
            patience: 10,
            seed: 0,
            fine_tune_words: false,
        }
    }
}

impl GlobalRankingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.lambda >= 0.0) || self.negatives_per_anchor == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid global ranking config {self:?}")));
        }
        Ok(())
    }
}

/// Same hinge structure as the local loss, over context-aware clip
/// embeddings `m` paired with sentence embeddings `v`.
pub fn video_story_loss(m: &[Vector], v: &[Vector], negatives: &NegativeSample, cfg: &GlobalRankingConfig) -> Result<f64> {
    let batch = PairedBatch::new(m.to_vec(), v.to_vec(), negatives)?;
    Ok(ranking_loss_grad(&batch, cfg.margin, cfg.lambda)?.loss)
}

/// Gradients of the video-story loss for all trainable parts.
#[derive(Debug, Clone)]
pub struct GlobalGradients {
    pub loss: f64,
    pub encoders: EncoderBundle,
    pub context: ResBrnnParams,
    pub sentence_inputs: Vec<Vec<Vector>>,
}

/// Loss and gradients of the video-story loss on one set; each story's
/// clips pass through the context network as one sequence.
pub fn global_gradients(
    model: &EmbeddingModel,
    set: &TrainingSet,
    negatives: &NegativeSample,
    cfg: &GlobalRankingConfig,
) -> Result<GlobalGradients> {
    let sentences = word_matrices(&model.words, set)?;
    let clips = clip_matrices(set);
    let lens: Vec<usize> = set.stories.iter().map(|s| s.clips.len()).collect();
    let mut context_grads = model.context.zeros_like();
    let g = encoder_gradients(&model.encoders, &sentences, &clips, |v, x| {
        let mut traces = Vec::with_capacity(lens.len());
        let mut m = Vec::with_capacity(x.len());
        let mut off = 0;
        for &n in &lens {
            let tr = resbrnn_trace(&model.context, &x[off..off + n])?;
            m.extend(tr.outputs.iter().cloned());
            traces.push(tr);
            off += n;
        }
        let batch = PairedBatch::new(m, v.to_vec(), negatives)?;
        let r = ranking_loss_grad(&batch, cfg.margin, cfg.lambda)?;
        let mut dx = Vec::with_capacity(x.len());
        let mut off = 0;
        for (tr, &n) in traces.iter().zip(&lens) {
            dx.extend(resbrnn_backward(&model.context, tr, &r.d_clips[off..off + n], &mut context_grads)?);
            off += n;
        }
        Ok((r.loss, r.d_sentences, dx))
    })?;
    Ok(GlobalGradients {
        loss: g.loss,
        encoders: g.params,
        context: context_grads,
        sentence_inputs: g.sentence_inputs,
    })
}

/// Joint ADAM training of encoders and context network on the video-story
/// loss. Requires a model that finished local training.
pub fn train_global(model: &EmbeddingModel, train: &TrainingSet, val: &TrainingSet, cfg: &GlobalRankingConfig) -> Result<TrainingOutcome> {
    if model.phase < Phase::Local {
        return Err(Error::PhaseOrder("global training requires a locally trained model".into()));
    }
    cfg.validate()?;
    for (name, set) in [("training", train), ("validation", val)] {
        if set.stories.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "the {name} set has {} stories; story-level negatives need at least 2",
                set.stories.len()
            )));
        }
    }
    let val_neg = sample_negatives(
        val,
        NegativeScope::OtherStories,
        cfg.negatives_per_anchor,
        0,
        cfg.seed ^ 0x5eed_0002,
    )?;
    let mut current = model.clone();
    let mut best = model.clone();
    let mut opt = ModelOptimizer::new(model, cfg.fine_tune_words);
    let mut ctx_state = AdamState::new(model.context.num_params());
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut curve = Vec::new();
    for epoch in 1..=cfg.epochs {
        let neg = sample_negatives(train, NegativeScope::OtherStories, cfg.negatives_per_anchor, epoch as u64, cfg.seed)?;
        let g = global_gradients(&current, train, &neg, cfg)?;
        adam_on(&mut current.encoders, &g.encoders, &mut opt.encoders, cfg.learning_rate)?;
        adam_on(&mut current.context, &g.context, &mut ctx_state, cfg.learning_rate)?;
        opt.step_words(&mut current, train, &g.sentence_inputs, cfg.learning_rate)?;
        let val_loss = global_gradients(&current, val, &val_neg, cfg)?.loss;
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
    best.phase = Phase::Global;
    Ok(TrainingOutcome {
        model: best,
        curve,
        best_epoch: stop.best_epoch,
    })
}

/// Local clip embeddings of `spans`.
pub fn local_embed_clips(encoders: &EncoderBundle, video: &VideoRecord, spans: &[Span]) -> Result<Vec<Vector>> {
    spans.iter().map(|s| encode_video_clip(encoders, &video.clip(*s)?)).collect()
}

/// Encodes each clip, then runs the context network over the sequence.
pub fn context_embed_clips(encoders: &EncoderBundle, p: &ResBrnnParams, video: &VideoRecord, spans: &[Span]) -> Result<Vec<Vector>> {
    resbrnn_forward(p, &local_embed_clips(encoders, video, spans)?)
}

/// As [`context_embed_clips`] for a bare feature matrix.
pub fn context_embed_matrices(encoders: &EncoderBundle, p: &ResBrnnParams, clips: &[Matrix]) -> Result<Vec<Vector>> {
    let xs = clips.iter().map(|c| encode_video_clip(encoders, c)).collect::<Result<Vec<_>>>()?;
    resbrnn_forward(p, &xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthConfig, WordVectorTable};
    use crate::gru::gru_cell;
    use crate::linalg::{finite_diff_grad, finite_diff_grad_5pt, max_relative_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vector> {
        (0..n).map(|_| Vector::random_uniform(rng, d, 1.0)).collect()
    }

    proptest! {
        #[test]
        fn residual_identity_and_reversal(seed in 0u64..1000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = seq(&mut rng, n, 4);
            prop_assert_eq!(resbrnn_forward(&ResBrnnParams::zeros(4), &xs).unwrap(), xs.clone());
            let p = ResBrnnParams::random(&mut rng, 4);
            let mut fwd = resbrnn_forward(&p, &xs).unwrap();
            let rev: Vec<Vector> = xs.iter().rev().cloned().collect();
            fwd.reverse();
            prop_assert_eq!(resbrnn_forward(&p, &rev).unwrap(), fwd);
        }
    }

    #[test]
    fn two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ResBrnnParams::random(&mut rng, 3);
        let xs = seq(&mut rng, 2, 3);
        let z = vec![0.0; 3];
        let f1 = gru_cell(&p.gru, &xs[0], &z).unwrap();
        let f2 = gru_cell(&p.gru, &xs[1], &f1).unwrap();
        let b2 = gru_cell(&p.gru, &xs[1], &z).unwrap();
        let b1 = gru_cell(&p.gru, &xs[0], &b2).unwrap();
        let m = resbrnn_forward(&p, &xs).unwrap();
        for i in 0..3 {
            assert!((m[0][i] - (xs[0][i] + f1[i] + b1[i])).abs() < 1e-15);
            assert!((m[1][i] - (xs[1][i] + f2[i] + b2[i])).abs() < 1e-15);
        }
        let single = resbrnn_forward(&p, &xs[..1]).unwrap();
        let h = gru_cell(&p.gru, &xs[0], &z).unwrap();
        for i in 0..3 {
            assert!((single[0][i] - (xs[0][i] + 2.0 * h[i])).abs() < 1e-15);
        }
        assert!(resbrnn_forward(&p, &[]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ResBrnnParams::random(&mut rng, 4).gru;
        let p = ResBrnnParams {
            gru: {
                let mut g = p;
                g.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v *= 5.0));
                g
            },
        };
        let xs = seq(&mut rng, 4, 4);
        let w = seq(&mut rng, 4, 4);
        let loss = |p: &ResBrnnParams, xs: &[Vector]| -> f64 {
            resbrnn_forward(p, xs).unwrap().iter().zip(&w).map(|(m, w)| m.dot(w).unwrap()).sum()
        };
        let tr = resbrnn_trace(&p, &xs).unwrap();
        let mut grads = p.zeros_like();
        let dx = resbrnn_backward(&p, &tr, &w, &mut grads).unwrap();
        let theta = p.to_flat();
        let fd = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                q.set_flat(t).unwrap();
                loss(&q, &xs)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&grads.to_flat(), &fd) < 1e-6);
        let flat_x: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let fdx = finite_diff_grad(
            |f| {
                let ys: Vec<Vector> = f.chunks(4).map(|c| Vector::from_vec(c.to_vec())).collect();
                loss(&p, &ys)
            },
            &flat_x,
            1e-5,
        )
        .unwrap();
        let an: Vec<f64> = dx.iter().flat_map(|x| x.iter().copied()).collect();
        assert!(max_relative_error(&an, &fdx) < 1e-6);
    }

    fn tiny(seed: u64) -> (EmbeddingModel, TrainingSet) {
        let cfg = SynthConfig {
            num_videos: 2,
            clips_per_video: 3,
            num_topics: 8,
            feature_dim: 5,
            frames_per_clip: 2,
            ..SynthConfig::default()
        };
        let corpus = synth_corpus(&cfg, seed).unwrap();
        let words = WordVectorTable::synthetic(&corpus.vocabulary(), 4, seed).unwrap();
        let model = EmbeddingModel::new(&mut ChaCha8Rng::seed_from_u64(seed), words, 5, 6);
        let set = TrainingSet::from_dataset(&corpus.dataset, &corpus.dataset.ids()).unwrap();
        (model, set)
    }

    #[test]
    fn story_loss_gradients_match_finite_differences() {
        let (mut model, set) = tiny(7);
        model.context.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v *= 6.0));
        let cfg = GlobalRankingConfig {
            margin: 1.0,
            ..GlobalRankingConfig::default()
        };
        let neg = sample_negatives(&set, NegativeScope::OtherStories, 1, 0, 3).unwrap();
        let g = global_gradients(&model, &set, &neg, &cfg).unwrap();
        let n_enc = model.encoders.num_params();
        let mut theta = model.encoders.to_flat();
        theta.extend(model.context.to_flat());
        let f = |t: &[f64]| {
            let mut m = model.clone();
            m.encoders.set_flat(&t[..n_enc]).unwrap();
            m.context.set_flat(&t[n_enc..]).unwrap();
            global_gradients(&m, &set, &neg, &cfg).unwrap().loss
        };
        let fd = finite_diff_grad_5pt(f, &theta, 1e-3).unwrap();
        let mut an = g.encoders.to_flat();
        an.extend(g.context.to_flat());
        let err = max_relative_error(&an, &fd);
        let worst = an
            .iter()
            .zip(&fd)
            .max_by(|a, b| max_relative_error(&[*a.0], &[*a.1]).total_cmp(&max_relative_error(&[*b.0], &[*b.1])))
            .unwrap();
        assert!(err < 1e-4, "{err} {worst:?}");
    }

    #[test]
    fn beta_equal_alpha_reproduces_local_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = seq(&mut rng, 3, 4);
        let v = seq(&mut rng, 3, 4);
        let neg = NegativeSample {
            sentence_negatives: vec![vec![1], vec![2], vec![0]],
            clip_negatives: vec![vec![2], vec![0], vec![1]],
        };
        let cfg = GlobalRankingConfig {
            margin: 0.1,
            ..GlobalRankingConfig::default()
        };
        let batch = PairedBatch::new(m.clone(), v.clone(), &neg).unwrap();
        let local = crate::embedding::clip_sentence_loss(&batch, &crate::embedding::RankingConfig::default()).unwrap();
        assert_eq!(video_story_loss(&m, &v, &neg, &cfg).unwrap(), local);
    }

    #[test]
    fn phase_order_and_zero_epochs() {
        let (model, set) = tiny(8);
        let cfg = GlobalRankingConfig {
            epochs: 0,
            ..GlobalRankingConfig::default()
        };
        assert!(matches!(train_global(&model, &set, &set, &cfg), Err(Error::PhaseOrder(_))));
        let mut local = model.clone();
        local.phase = Phase::Local;
        let out = train_global(&local, &set, &set, &cfg).unwrap();
        assert_eq!(out.model.encoders, local.encoders);
        assert_eq!(out.model.context, local.context);
        let cfg = GlobalRankingConfig {
            epochs: 3,
            learning_rate: 0.01,
            ..GlobalRankingConfig::default()
        };
        let a = train_global(&local, &set, &set, &cfg).unwrap();
        let b = train_global(&local, &set, &set, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.phase, Phase::Global);
    }
}
