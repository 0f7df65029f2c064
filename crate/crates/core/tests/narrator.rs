//! Narrator training on a small planted corpus.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidstory::data::{synth_corpus, SynthConfig, WordVectorTable};
use vidstory::embedding::{train_local, EmbeddingModel, RankingConfig, TrainingSet};
use vidstory::error::Error;
use vidstory::linalg::ParamSet;
use vidstory::narrator::*;
use vidstory::resbrnn::{train_global, GlobalRankingConfig};
use vidstory::retrieval::SentencePool;
use vidstory::seeding::stream_rng;

struct Fixture {
    local: EmbeddingModel,
    model: EmbeddingModel,
    pool: SentencePool,
    idf: vidstory::metrics::CorpusIdf,
    videos: Vec<NarratorVideo>,
}

fn fixture() -> Fixture {
    let cfg = SynthConfig {
        num_videos: 4,
        filler_frames: 3,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&cfg, 3).unwrap();
    let words = WordVectorTable::synthetic(&corpus.vocabulary(), 8, 3).unwrap();
    let init = EmbeddingModel::new(&mut ChaCha8Rng::seed_from_u64(3), words, cfg.feature_dim, 8);
    let ids = corpus.dataset.ids();
    let set = TrainingSet::from_dataset(&corpus.dataset, &ids).unwrap();
    let rc = RankingConfig {
        epochs: 10,
        patience: 10,
        learning_rate: 0.01,
        ..RankingConfig::default()
    };
    let local = train_local(&init, &set, &set, &rc).unwrap().model;
    let gc = GlobalRankingConfig {
        epochs: 10,
        patience: 10,
        learning_rate: 0.01,
        ..GlobalRankingConfig::default()
    };
    let model = train_global(&local, &set, &set, &gc).unwrap().model;
    let pool = SentencePool::from_training_set(&model, &set).unwrap();
    let idf = story_idf(&corpus.dataset, &ids).unwrap();
    let videos = ids
        .iter()
        .map(|id| NarratorVideo::from_dataset(&model.encoders, &corpus.dataset, id, Some(corpus.planted[id].clone())).unwrap())
        .collect();
    Fixture {
        local,
        model,
        pool,
        idf,
        videos,
    }
}

fn settings() -> NarratorSettings {
    NarratorSettings {
        kappa: 6.0,
        sigma_l: 1.0,
        ..NarratorSettings::default()
    }
}

fn env<'a>(f: &'a Fixture, mode: RewardMode) -> RewardEnv<'a> {
    RewardEnv {
        model: &f.model,
        pool: &f.pool,
        idf: &f.idf,
        k: 4,
        mode,
    }
}

#[test]
fn baseline_is_the_mean_of_its_rollouts() {
    let f = fixture();
    let env = env(&f, RewardMode::Iou);
    let v = &f.videos[0];
    let b = baseline_reward(&env, v, 10, &settings(), &mut stream_rng(7, "b", 0)).unwrap();
    // replay the same generator and score each rollout by hand
    let mut rng = stream_rng(7, "b", 0);
    let annotated: BTreeSet<usize> = v.spans.iter().flat_map(|s| s.start..s.end).collect();
    let mut total = 0.0;
    for _ in 0..10 {
        let clips = random_clips(&mut rng, v.frames.len(), v.mean_reference_len(), &settings());
        let picked: BTreeSet<usize> = clips.iter().flat_map(|c| c.span.start..c.span.end).collect();
        total += picked.intersection(&annotated).count() as f64 / picked.union(&annotated).count() as f64;
    }
    assert!((b - total / 10.0).abs() < 1e-12, "{b} vs {}", total / 10.0);
}

#[test]
fn zero_epochs_leave_the_policy_alone() {
    let f = fixture();
    let env = env(&f, RewardMode::Cider);
    let params = NarratorParams::new(&mut ChaCha8Rng::seed_from_u64(1), f.model.encoders.hidden_dim(), settings());
    let cfg = NarratorTrainConfig {
        epochs: 0,
        baseline_rollouts: 2,
        ..NarratorTrainConfig::default()
    };
    let out = train_narrator(&params, &f.videos, &env, &cfg).unwrap();
    assert_eq!(out.params, params);
    assert!(out.curve.is_empty());
    assert_eq!(out.baselines.len(), f.videos.len());
}

#[test]
fn training_is_reproducible_and_moves_the_policy() {
    let f = fixture();
    let env = env(&f, RewardMode::Iou);
    let params = NarratorParams::new(&mut ChaCha8Rng::seed_from_u64(1), f.model.encoders.hidden_dim(), settings());
    let cfg = NarratorTrainConfig {
        epochs: 3,
        episodes: 2,
        baseline_rollouts: 3,
        learning_rate: 0.05,
        seed: 9,
        ..NarratorTrainConfig::default()
    };
    let a = train_narrator(&params, &f.videos, &env, &cfg).unwrap();
    let b = train_narrator(&params, &f.videos, &env, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve.len(), 3);
    assert_ne!(a.params.to_flat(), params.to_flat());
    let expected = f.videos.iter().map(|v| a.baselines[&v.video.id]).sum::<f64>() / f.videos.len() as f64;
    assert!(a.curve.iter().all(|r| (r.baseline - expected).abs() < 1e-12));
    let mut csv = Vec::new();
    write_reward_csv(&mut csv, &a.curve).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
}

#[test]
fn a_local_only_model_cannot_drive_the_narrator() {
    let f = fixture();
    let mut env = env(&f, RewardMode::Cider);
    env.model = &f.local;
    let params = NarratorParams::zeros(f.model.encoders.hidden_dim(), settings());
    let err = train_narrator(&params, &f.videos, &env, &NarratorTrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::PhaseOrder(_)), "{err}");
}

#[test]
fn generated_stories_follow_the_proposals() {
    let f = fixture();
    let mut params = NarratorParams::new(&mut ChaCha8Rng::seed_from_u64(2), f.model.encoders.hidden_dim(), settings());
    params.settings.epsilon = 0.0;
    let v = &f.videos[0];
    let g = generate_story(&f.model, &params, &f.pool, &v.video, 4).unwrap();
    assert!(g.warning.is_none());
    assert_eq!(g.story.len(), g.proposals.len());
    let used: BTreeSet<usize> = g.story.entries.iter().map(|e| e.pool_index).collect();
    assert_eq!(used.len(), g.story.len());
    for (e, p) in g.story.entries.iter().zip(&g.proposals) {
        assert_eq!(e.span, Some(p.span));
    }

    params.settings.epsilon = 0.99;
    let g = generate_story(&f.model, &params, &f.pool, &v.video, 4).unwrap();
    assert!(g.story.is_empty() && g.warning.is_some());
}
