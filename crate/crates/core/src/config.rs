//! Run configuration (`key = value` text, TOML syntax) and the run manifest
//! that records hashes and completed phases.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::data::{AnnotationRules, CheckpointKind, DatasetSplit, SynthConfig};
use crate::embedding::RankingConfig;
use crate::error::{Error, Result};
use crate::gru::{HIDDEN_DIM, WORD_DIM};
use crate::narrator::{NarratorSettings, NarratorTrainConfig, PointerRule, RewardMode, DEFAULT_BASELINE_ROLLOUTS, DEFAULT_EPISODES};
use crate::resbrnn::GlobalRankingConfig;
use crate::retrieval::DEFAULT_K;
use crate::seeding::content_hash;

pub const MANIFEST_SCHEMA: &str = "vidstory.manifest/v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Text word-vector file; synthetic vectors over the corpus vocabulary
    /// when absent.
    pub word_vectors: Option<PathBuf>,
    pub word_dim: usize,
    pub hidden: usize,
    pub min_sentences: usize,
    pub min_words: usize,

    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub negatives: usize,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub patience: usize,
    pub fine_tune_words: bool,

    pub tau: f64,
    pub epsilon: f64,
    pub kappa: f64,
    pub sigma_l: f64,
    pub pointer: PointerRule,
    pub k: usize,
    pub baseline_rollouts: usize,
    pub episodes: usize,
    pub narrator_epochs: usize,
    pub narrator_learning_rate: f64,
    pub reward: RewardMode,

    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let local = RankingConfig::default();
        let global = GlobalRankingConfig::default();
        let narrator = NarratorSettings::default();
        let nt = NarratorTrainConfig::default();
        let rules = AnnotationRules::default();
        RunConfig {
            seed: 0,
            word_vectors: None,
            word_dim: WORD_DIM,
            hidden: HIDDEN_DIM,
            min_sentences: rules.min_sentences,
            min_words: rules.min_words,
            alpha: local.margin,
            beta: global.margin,
            lambda: local.lambda,
            negatives: local.negatives_per_anchor,
            learning_rate: local.learning_rate,
            local_epochs: local.epochs,
            global_epochs: global.epochs,
            patience: local.patience,
            fine_tune_words: local.fine_tune_words,
            tau: narrator.tau,
            epsilon: narrator.epsilon,
            kappa: narrator.kappa,
            sigma_l: narrator.sigma_l,
            pointer: narrator.pointer,
            k: DEFAULT_K,
            baseline_rollouts: DEFAULT_BASELINE_ROLLOUTS,
            episodes: DEFAULT_EPISODES,
            narrator_epochs: nt.epochs,
            narrator_learning_rate: nt.learning_rate,
            reward: RewardMode::Cider,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("word_dim and hidden must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        self.local().validate()?;
        self.global().validate()?;
        self.narrator_settings().validate()?;
        let t = self.narrator_training();
        if t.episodes == 0 || t.baseline_rollouts == 0 || !(t.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "episodes, baseline_rollouts and narrator_learning_rate must be positive".into(),
            ));
        }
        self.synth.validate()
    }

    /// Hash of the canonical serialized form.
    pub fn hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn rules(&self) -> AnnotationRules {
        AnnotationRules {
            min_sentences: self.min_sentences,
            min_words: self.min_words,
        }
    }

    pub fn local(&self) -> RankingConfig {
        RankingConfig {
            margin: self.alpha,
            lambda: self.lambda,
            negatives_per_anchor: self.negatives,
            epochs: self.local_epochs,
            learning_rate: self.learning_rate,
            patience: self.patience,
            seed: self.seed,
            fine_tune_words: self.fine_tune_words,
        }
    }

    pub fn global(&self) -> GlobalRankingConfig {
        GlobalRankingConfig {
            margin: self.beta,
            lambda: self.lambda,
            negatives_per_anchor: self.negatives,
            epochs: self.global_epochs,
            learning_rate: self.learning_rate,
            patience: self.patience,
            seed: self.seed,
            fine_tune_words: self.fine_tune_words,
        }
    }

    pub fn narrator_settings(&self) -> NarratorSettings {
        NarratorSettings {
            tau: self.tau,
            epsilon: self.epsilon,
            kappa: self.kappa,
            sigma_l: self.sigma_l,
            pointer: self.pointer,
        }
    }

    pub fn narrator_training(&self) -> NarratorTrainConfig {
        NarratorTrainConfig {
            epochs: self.narrator_epochs,
            episodes: self.episodes,
            baseline_rollouts: self.baseline_rollouts,
            learning_rate: self.narrator_learning_rate,
            k: self.k,
            mode: self.reward,
            seed: self.seed,
        }
    }
}

/// Content hash of every file under `dir`: SHA-256 over sorted
/// `relative-path NUL file-hash` lines.
pub fn directory_hash(dir: &Path) -> Result<String> {
    let mut lines = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let bytes = std::fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path());
        lines.push(format!("{}\0{}\n", rel.to_string_lossy(), content_hash(&bytes)));
    }
    if lines.is_empty() {
        return Err(Error::Empty(format!("no input files under {}", dir.display())));
    }
    Ok(content_hash(lines.concat().as_bytes()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub kind: CheckpointKind,
    pub checkpoint: String,
    pub checkpoint_hash: String,
    pub curve: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub data_dir: PathBuf,
    pub input_hash: String,
    pub split: DatasetSplit,
    /// Configuration of the most recent phase, echoed in full.
    pub config: RunConfig,
    pub config_hash: String,
    pub phases: Vec<PhaseRecord>,
}

impl RunManifest {
    pub fn new(data_dir: PathBuf, input_hash: String, split: DatasetSplit, config: RunConfig) -> Self {
        RunManifest {
            schema: MANIFEST_SCHEMA.to_owned(),
            data_dir,
            input_hash,
            split,
            config_hash: config.hash(),
            config,
            phases: Vec::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::PhaseOrder(format!("{} has no manifest; run train-local first", run_dir.display())),
            _ => Error::io(&path, e),
        })?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::validation(
                "manifest schema",
                format!("expected {MANIFEST_SCHEMA}, found {}", m.schema),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn phase(&self, kind: CheckpointKind) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.kind == kind)
    }

    /// Path of the checkpoint for `kind` after checking that the phase was
    /// completed and its file is unchanged.
    pub fn require(&self, run_dir: &Path, kind: CheckpointKind) -> Result<PathBuf> {
        let rec = self
            .phase(kind)
            .ok_or_else(|| Error::PhaseOrder(format!("the {kind:?} phase has not been completed in {}", run_dir.display())))?;
        let path = run_dir.join(&rec.checkpoint);
        if file_hash(&path)? != rec.checkpoint_hash {
            return Err(Error::validation(
                rec.checkpoint.clone(),
                "checkpoint changed since it was recorded",
            ));
        }
        Ok(path)
    }

    /// Checks that the dataset still hashes to the recorded value.
    pub fn check_inputs(&self) -> Result<()> {
        let now = directory_hash(&self.data_dir)?;
        if now != self.input_hash {
            return Err(Error::validation(
                self.data_dir.display().to_string(),
                "dataset changed since the run started",
            ));
        }
        Ok(())
    }

    /// Records `rec`, dropping it and every later phase first: retraining a
    /// phase invalidates what was built on it.
    pub fn record(&mut self, rec: PhaseRecord, config: RunConfig) {
        self.phases.retain(|p| p.kind < rec.kind);
        self.phases.push(rec);
        self.config_hash = config.hash();
        self.config = config;
    }
}
