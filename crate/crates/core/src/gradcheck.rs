//! Finite-difference checks of the analytic gradients of both ranking
//! losses on small random instances.

use rand::Rng;
use serde::Serialize;

use crate::data::WordVectorTable;
use crate::embedding::{
    accumulate_word_grads, local_gradients, sample_negatives, EmbeddingModel, NegativeScope, RankingConfig, StoryExample, TrainingSet,
};
use crate::error::Result;
use crate::linalg::{finite_diff_grad_5pt, max_relative_error, Matrix, ParamSet};
use crate::resbrnn::{global_gradients, GlobalRankingConfig};
use crate::seeding::stream_rng;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-3;
const MAX_DIM: usize = 8;
const MAX_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub loss: &'static str,
    pub instance: usize,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// A random model and training set with every dimension and sequence
/// length in `[2, 8]` and `[1, 5]` respectively.
pub fn random_instance(seed: u64, index: usize) -> Result<(EmbeddingModel, TrainingSet)> {
    let mut rng = stream_rng(seed, "gradcheck", index as u64);
    let word_dim = rng.random_range(2..=MAX_DIM);
    let feature_dim = rng.random_range(2..=MAX_DIM);
    let hidden = rng.random_range(2..=MAX_DIM);
    let vocab: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let words = WordVectorTable::synthetic(&vocab, word_dim, rng.random())?;
    let mut model = EmbeddingModel::new(&mut rng, words, feature_dim, hidden);
    // larger weights than the training init keep the gradients well above
    // finite-difference roundoff
    model.encoders.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v *= 6.0));
    model.context.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v *= 6.0));
    let mut stories = Vec::new();
    for s in 0..2 {
        let n = rng.random_range(2..=3);
        let mut ex = StoryExample {
            video_id: format!("v{s}"),
            clips: Vec::new(),
            texts: Vec::new(),
            tokens: Vec::new(),
            spans: Vec::new(),
        };
        for c in 0..n {
            let t = rng.random_range(1..=MAX_LEN);
            ex.clips.push(Matrix::random_uniform(&mut rng, t, feature_dim, 1.0));
            let len = rng.random_range(1..=MAX_LEN);
            let toks: Vec<String> = (0..len).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect();
            ex.texts.push(format!("s{s} c{c} {}", toks.join(" ")));
            ex.tokens.push(toks);
        }
        stories.push(ex);
    }
    Ok((model, TrainingSet { stories }))
}

fn flat_model(m: &EmbeddingModel, with_context: bool) -> Vec<f64> {
    let mut t = m.encoders.to_flat();
    if with_context {
        t.extend(m.context.to_flat());
    }
    t.extend(m.words.vectors().as_slice());
    t
}

fn set_flat_model(m: &mut EmbeddingModel, theta: &[f64], with_context: bool) -> Result<()> {
    let ne = m.encoders.num_params();
    m.encoders.set_flat(&theta[..ne])?;
    let mut at = ne;
    if with_context {
        let nc = m.context.num_params();
        m.context.set_flat(&theta[at..at + nc])?;
        at += nc;
    }
    m.words.vectors_mut().as_mut_slice().copy_from_slice(&theta[at..]);
    Ok(())
}

/// Local clip-sentence loss: encoders and word vectors.
pub fn check_local(model: &EmbeddingModel, set: &TrainingSet, margin: f64, seed: u64) -> Result<f64> {
    let cfg = RankingConfig {
        margin,
        ..RankingConfig::default()
    };
    let neg = sample_negatives(set, NegativeScope::OtherPairs, 1, 0, seed)?;
    let g = local_gradients(model, set, &neg, &cfg)?;
    let mut words = vec![0.0; model.words.vectors().as_slice().len()];
    accumulate_word_grads(&model.words, set, &g.sentence_inputs, &mut words);
    let mut an = g.params.to_flat();
    an.extend(words);
    let theta = flat_model(model, false);
    let fd = finite_diff_grad_5pt(
        |t| {
            let mut m = model.clone();
            set_flat_model(&mut m, t, false).expect("same layout");
            local_gradients(&m, set, &neg, &cfg).map(|g| g.loss).unwrap_or(f64::NAN)
        },
        &theta,
        STEP,
    )?;
    Ok(max_relative_error(&an, &fd))
}

/// Video-story loss through the context network: encoders, context
/// parameters and word vectors.
pub fn check_global(model: &EmbeddingModel, set: &TrainingSet, margin: f64, seed: u64) -> Result<f64> {
    let cfg = GlobalRankingConfig {
        margin,
        ..GlobalRankingConfig::default()
    };
    let neg = sample_negatives(set, NegativeScope::OtherStories, 1, 0, seed)?;
    let g = global_gradients(model, set, &neg, &cfg)?;
    let mut words = vec![0.0; model.words.vectors().as_slice().len()];
    accumulate_word_grads(&model.words, set, &g.sentence_inputs, &mut words);
    let mut an = g.encoders.to_flat();
    an.extend(g.context.to_flat());
    an.extend(words);
    let theta = flat_model(model, true);
    let fd = finite_diff_grad_5pt(
        |t| {
            let mut m = model.clone();
            set_flat_model(&mut m, t, true).expect("same layout");
            global_gradients(&m, set, &neg, &cfg).map(|g| g.loss).unwrap_or(f64::NAN)
        },
        &theta,
        STEP,
    )?;
    Ok(max_relative_error(&an, &fd))
}

/// Both losses on `instances` random instances. Margins are drawn from
/// `[0.1, 1]`.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::with_capacity(2 * instances);
    for i in 0..instances {
        let (model, set) = random_instance(seed, i)?;
        let mut rng = stream_rng(seed, "gradcheck-margin", i as u64);
        let local = check_local(&model, &set, rng.random_range(0.1..=1.0), seed ^ i as u64)?;
        rows.push(GradCheckRow {
            loss: "clip_sentence",
            instance: i,
            params: model.encoders.num_params() + model.words.vectors().as_slice().len(),
            max_rel_error: local,
            passed: local < TOLERANCE,
        });
        let global = check_global(&model, &set, rng.random_range(0.1..=1.0), seed ^ i as u64)?;
        rows.push(GradCheckRow {
            loss: "video_story",
            instance: i,
            params: model.encoders.num_params() + model.context.num_params() + model.words.vectors().as_slice().len(),
            max_rel_error: global,
            passed: global < TOLERANCE,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_respect_size_limits() {
        for i in 0..10 {
            let (m, set) = random_instance(3, i).unwrap();
            assert!(m.words.dim() <= MAX_DIM && m.encoders.hidden_dim() <= MAX_DIM);
            for s in &set.stories {
                assert!(s.clips.iter().all(|c| c.rows() <= MAX_LEN && c.cols() <= MAX_DIM));
                assert!(s.tokens.iter().all(|t| !t.is_empty() && t.len() <= MAX_LEN));
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let (model, set) = random_instance(1, 0).unwrap();
        let neg = sample_negatives(&set, NegativeScope::OtherPairs, 1, 0, 1).unwrap();
        let g = local_gradients(&model, &set, &neg, &RankingConfig::default()).unwrap();
        let mut an = g.params.to_flat();
        an[0] += 1e-2 * (1.0 + an[0].abs());
        let fd = finite_diff_grad_5pt(
            |t| {
                let mut m = model.clone();
                m.encoders.set_flat(t).unwrap();
                local_gradients(&m, &set, &neg, &RankingConfig::default()).unwrap().loss
            },
            &model.encoders.to_flat(),
            STEP,
        )
        .unwrap();
        assert!(max_relative_error(&an, &fd) > TOLERANCE);
    }
}
