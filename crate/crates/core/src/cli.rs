//! The `vidstory` command line: training phases, storytelling, evaluation
//! and the gradient check, all writing into a run directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::{directory_hash, file_hash, PhaseRecord, RunConfig, RunManifest};
use crate::data::{load_checkpoint, make_split, save_checkpoint, synth_corpus, CheckpointKind, Dataset, WordVectorTable};
use crate::embedding::{train_local, EmbeddingModel, EpochRecord, TrainingSet};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::metrics::{score_story, tokenize, write_reports_csv, CorpusIdf, MetricReport, MetricRow, TokenizedText};
use crate::narrator::{generate_story, story_idf, train_narrator, write_reward_csv, NarratorParams, NarratorVideo, RewardEnv, RewardMode};
use crate::resbrnn::train_global;
use crate::retrieval::{read_story_records, render_story, write_story_records, SentencePool, StoryRecord};
use crate::seeding::stream_rng;

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_WARNING: u8 = 2;

const LOCAL_CKPT: &str = "local.ckpt.json";
const GLOBAL_CKPT: &str = "global.ckpt.json";
const NARRATOR_CKPT: &str = "narrator.ckpt.json";
const IDF_FILE: &str = "idf.json";

#[derive(Debug, Parser)]
#[command(name = "vidstory", version, about = "Video storytelling: embeddings, narrator and retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Cider,
    Iou,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct StoryArgs {
    /// Candidates per clip for non-duplicate retrieval.
    #[arg(long)]
    pub k: Option<usize>,
    /// Test-time clip selection threshold.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train clip and sentence encoders on isolated pairs.
    TrainLocal {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the context network on whole stories.
    TrainGlobal {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the clip-selecting narrator.
    TrainNarrator {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        story: StoryArgs,
    },
    /// Generate stories for videos of the run's dataset.
    Tell {
        #[arg(long)]
        out_dir: PathBuf,
        /// Video id; repeatable.
        #[arg(long)]
        video: Vec<String>,
        /// Tell every video of a split (train, val or test).
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        story: StoryArgs,
    },
    /// Score story records against the dataset's reference stories.
    Evaluate {
        /// A story JSON-lines file or a directory of them.
        #[arg(long)]
        stories: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write metrics.csv and metrics.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

/// Outcome of a successful command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Warning,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<Status> {
    match cli.command {
        Command::Synth { out_dir, cfg } => cmd_synth(&out_dir, &cfg, out),
        Command::TrainLocal { data, out_dir, cfg } => cmd_train_local(&data, &out_dir, &cfg, out),
        Command::TrainGlobal { out_dir, cfg } => cmd_train_global(&out_dir, &cfg, out),
        Command::TrainNarrator { out_dir, mode, cfg, story } => cmd_train_narrator(&out_dir, mode, &cfg, &story, out),
        Command::Tell {
            out_dir,
            video,
            split,
            story,
        } => cmd_tell(&out_dir, &video, split.as_deref(), &story, out),
        Command::Evaluate {
            stories,
            data,
            out_dir,
            cfg,
        } => cmd_evaluate(&stories, &data, out_dir.as_deref(), &cfg, out),
        Command::Gradcheck { seed, instances } => cmd_gradcheck(seed, instances, out),
    }
}

/// Parses `args`, runs the command and maps the result to an exit status.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(Status::Ok) => ExitCode::from(EXIT_OK),
        Ok(Status::Warning) => ExitCode::from(EXIT_WARNING),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn write_out(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text).map_err(|e| Error::io("<stdout>", e))
}

/// Config file if given, else `base`, else defaults; then flag overrides.
fn resolve_config(args: &ConfigArgs, base: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) => b.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_story_args(cfg: &mut RunConfig, story: &StoryArgs) -> Result<()> {
    if let Some(k) = story.k {
        cfg.k = k;
    }
    if let Some(e) = story.epsilon {
        cfg.epsilon = e;
    }
    cfg.validate()
}

fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn phase_record(run_dir: &Path, kind: CheckpointKind, ckpt: &str, curve: &str, cfg: &RunConfig) -> Result<PhaseRecord> {
    Ok(PhaseRecord {
        kind,
        checkpoint: ckpt.to_owned(),
        checkpoint_hash: file_hash(&run_dir.join(ckpt))?,
        curve: curve.to_owned(),
        config_hash: cfg.hash(),
    })
}

fn load_run_dataset(m: &RunManifest) -> Result<Dataset> {
    m.check_inputs()?;
    Dataset::load(&m.data_dir, &m.config.rules())
}

fn cmd_synth(out_dir: &Path, args: &ConfigArgs, out: &mut dyn Write) -> Result<Status> {
    let cfg = resolve_config(args, None)?;
    let corpus = synth_corpus(&cfg.synth, cfg.seed)?;
    corpus.dataset.save(out_dir)?;
    write_out(
        out,
        format_args!(
            "wrote {} videos and {} stories to {}\n",
            corpus.dataset.videos.len(),
            corpus.dataset.annotations.len(),
            out_dir.display()
        ),
    )?;
    Ok(Status::Ok)
}

fn word_table(cfg: &RunConfig, dataset: &Dataset) -> Result<WordVectorTable> {
    match &cfg.word_vectors {
        Some(p) => WordVectorTable::load_text(p, cfg.word_dim, cfg.seed),
        None => {
            let mut vocab: Vec<String> = dataset
                .annotations
                .iter()
                .flat_map(|a| a.sentences.iter())
                .flat_map(|s| tokenize(&s.text).tokens().to_vec())
                .collect();
            vocab.sort();
            vocab.dedup();
            WordVectorTable::synthetic(&vocab, cfg.word_dim, cfg.seed)
        }
    }
}

fn cmd_train_local(data: &Path, run_dir: &Path, args: &ConfigArgs, out: &mut dyn Write) -> Result<Status> {
    let cfg = resolve_config(args, None)?;
    let dataset = Dataset::load(data, &cfg.rules())?;
    let input_hash = directory_hash(data)?;
    let split = make_split(&dataset.ids(), cfg.seed)?;
    let feature_dim = dataset.feature_dim().ok_or_else(|| Error::Empty("dataset has no videos".into()))?;
    let words = word_table(&cfg, &dataset)?;
    let model = EmbeddingModel::new(&mut stream_rng(cfg.seed, "model-init", 0), words, feature_dim, cfg.hidden);
    let train = TrainingSet::from_dataset(&dataset, &split.train)?;
    let val = TrainingSet::from_dataset(&dataset, &split.val)?;
    info!("local training on {} pairs", train.num_pairs());
    let outcome = train_local(&model, &train, &val, &cfg.local())?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    save_checkpoint(&run_dir.join(LOCAL_CKPT), CheckpointKind::Local, &outcome.model)?;
    write_curve(&run_dir.join("local_curve.csv"), &outcome.curve)?;
    let data_dir = std::fs::canonicalize(data).map_err(|e| Error::io(data, e))?;
    let mut manifest = RunManifest::new(data_dir, input_hash, split, cfg.clone());
    manifest.record(
        phase_record(run_dir, CheckpointKind::Local, LOCAL_CKPT, "local_curve.csv", &cfg)?,
        cfg,
    );
    manifest.save(run_dir)?;
    report_curve(out, "local", &outcome.curve, outcome.best_epoch)?;
    Ok(Status::Ok)
}

fn report_curve(out: &mut dyn Write, name: &str, curve: &[EpochRecord], best: usize) -> Result<()> {
    match (curve.first(), curve.iter().find(|r| r.epoch == best)) {
        (Some(first), Some(b)) => write_out(
            out,
            format_args!(
                "{name}: {} epochs, train loss {:.4} -> {:.4}, best validation loss {:.4} at epoch {best}\n",
                curve.len(),
                first.train_loss,
                curve.last().map_or(first.train_loss, |r| r.train_loss),
                b.val_loss
            ),
        ),
        _ => write_out(out, format_args!("{name}: no epochs run\n")),
    }
}

fn cmd_train_global(run_dir: &Path, args: &ConfigArgs, out: &mut dyn Write) -> Result<Status> {
    let mut manifest = RunManifest::load(run_dir)?;
    let cfg = resolve_config(args, Some(&manifest.config))?;
    let local: EmbeddingModel = load_checkpoint(&manifest.require(run_dir, CheckpointKind::Local)?, CheckpointKind::Local)?;
    let dataset = load_run_dataset(&manifest)?;
    let train = TrainingSet::from_dataset(&dataset, &manifest.split.train)?;
    let val = TrainingSet::from_dataset(&dataset, &manifest.split.val)?;
    let outcome = train_global(&local, &train, &val, &cfg.global())?;
    save_checkpoint(&run_dir.join(GLOBAL_CKPT), CheckpointKind::Global, &outcome.model)?;
    write_curve(&run_dir.join("global_curve.csv"), &outcome.curve)?;
    manifest.record(
        phase_record(run_dir, CheckpointKind::Global, GLOBAL_CKPT, "global_curve.csv", &cfg)?,
        cfg,
    );
    manifest.save(run_dir)?;
    report_curve(out, "global", &outcome.curve, outcome.best_epoch)?;
    Ok(Status::Ok)
}

fn cmd_train_narrator(run_dir: &Path, mode: Option<ModeArg>, args: &ConfigArgs, story: &StoryArgs, out: &mut dyn Write) -> Result<Status> {
    let mut manifest = RunManifest::load(run_dir)?;
    let mut cfg = resolve_config(args, Some(&manifest.config))?;
    if let Some(m) = mode {
        cfg.reward = match m {
            ModeArg::Cider => RewardMode::Cider,
            ModeArg::Iou => RewardMode::Iou,
        };
    }
    apply_story_args(&mut cfg, story)?;
    let model: EmbeddingModel = load_checkpoint(&manifest.require(run_dir, CheckpointKind::Global)?, CheckpointKind::Global)?;
    let dataset = load_run_dataset(&manifest)?;
    let ids = &manifest.split.train;
    let set = TrainingSet::from_dataset(&dataset, ids)?;
    let pool = SentencePool::from_training_set(&model, &set)?;
    let idf = story_idf(&dataset, ids)?;
    idf.save(&run_dir.join(IDF_FILE))?;
    let videos = ids
        .iter()
        .map(|id| NarratorVideo::from_dataset(&model.encoders, &dataset, id, None))
        .collect::<Result<Vec<_>>>()?;
    let env = RewardEnv {
        model: &model,
        pool: &pool,
        idf: &idf,
        k: cfg.k,
        mode: cfg.reward,
    };
    let init = NarratorParams::new(
        &mut stream_rng(cfg.seed, "narrator-init", 0),
        model.encoders.hidden_dim(),
        cfg.narrator_settings(),
    );
    let outcome = train_narrator(&init, &videos, &env, &cfg.narrator_training())?;
    save_checkpoint(&run_dir.join(NARRATOR_CKPT), CheckpointKind::Narrator, &outcome.params)?;
    let curve_path = run_dir.join("reward_curve.csv");
    let f = std::fs::File::create(&curve_path).map_err(|e| Error::io(&curve_path, e))?;
    write_reward_csv(f, &outcome.curve)?;
    manifest.record(
        phase_record(run_dir, CheckpointKind::Narrator, NARRATOR_CKPT, "reward_curve.csv", &cfg)?,
        cfg,
    );
    manifest.save(run_dir)?;
    let baseline = outcome.baselines.values().sum::<f64>() / outcome.baselines.len() as f64;
    match outcome.curve.last() {
        Some(last) => write_out(
            out,
            format_args!(
                "narrator: {} epochs, test-mode reward {:.4}, random baseline {:.4}\n",
                outcome.curve.len(),
                last.test_reward,
                baseline
            ),
        )?,
        None => write_out(out, format_args!("narrator: no epochs run, random baseline {baseline:.4}\n"))?,
    }
    Ok(Status::Ok)
}

fn cmd_tell(run_dir: &Path, videos: &[String], split: Option<&str>, story: &StoryArgs, out: &mut dyn Write) -> Result<Status> {
    let manifest = RunManifest::load(run_dir)?;
    let mut cfg = manifest.config.clone();
    apply_story_args(&mut cfg, story)?;
    let model: EmbeddingModel = load_checkpoint(&manifest.require(run_dir, CheckpointKind::Global)?, CheckpointKind::Global)?;
    let mut narrator: NarratorParams = load_checkpoint(&manifest.require(run_dir, CheckpointKind::Narrator)?, CheckpointKind::Narrator)?;
    narrator.settings.epsilon = cfg.epsilon;
    let dataset = load_run_dataset(&manifest)?;
    let mut ids: Vec<String> = videos.to_vec();
    match split {
        Some("train") => ids.extend(manifest.split.train.iter().cloned()),
        Some("val") => ids.extend(manifest.split.val.iter().cloned()),
        Some("test") => ids.extend(manifest.split.test.iter().cloned()),
        Some(other) => {
            return Err(Error::InvalidConfig(format!(
                "unknown split {other:?}; expected train, val or test"
            )))
        }
        None => {}
    }
    if ids.is_empty() {
        return Err(Error::InvalidConfig("name at least one --video or a --split".into()));
    }
    let set = TrainingSet::from_dataset(&dataset, &manifest.split.train)?;
    let pool = SentencePool::from_training_set(&model, &set)?;
    let story_dir = run_dir.join("stories");
    std::fs::create_dir_all(&story_dir).map_err(|e| Error::io(&story_dir, e))?;
    let mut status = Status::Ok;
    for id in &ids {
        let video = dataset.video(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        let g = generate_story(&model, &narrator, &pool, video, cfg.k)?;
        if let Some(w) = &g.warning {
            eprintln!("warning: {w}");
            status = Status::Warning;
        }
        write_story_records(&story_dir.join(format!("{id}.jsonl")), &StoryRecord::from_story(id, &g.story))?;
        render_story(&mut *out, id, &g.story).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(status)
}

fn story_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Per-video scores of `stories` against the dataset references, plus the
/// corpus mean. The CIDEr document statistics come from the references of
/// the evaluated videos.
pub fn evaluate_stories(records: &[StoryRecord], dataset: &Dataset) -> Result<(Vec<MetricRow>, MetricReport)> {
    if records.is_empty() {
        return Err(Error::Empty("no story records".into()));
    }
    let mut by_video: BTreeMap<&str, Vec<&StoryRecord>> = BTreeMap::new();
    for r in records {
        by_video.entry(r.video_id.as_str()).or_default().push(r);
    }
    let mut refs = BTreeMap::new();
    for id in by_video.keys() {
        if dataset.video(id).is_none() {
            return Err(Error::UnknownId((*id).to_owned()));
        }
        let r: Vec<Vec<TokenizedText>> = crate::narrator::reference_stories(dataset, id);
        if r.is_empty() {
            return Err(Error::Empty(format!("video {id} has no reference stories")));
        }
        refs.insert(*id, r);
    }
    let docs: Vec<TokenizedText> = refs.values().flatten().map(TokenizedText::concat).collect();
    let idf = CorpusIdf::build(&docs)?;
    let mut rows = Vec::with_capacity(by_video.len());
    for (id, mut recs) in by_video {
        recs.sort_by_key(|r| r.index);
        let story: Vec<TokenizedText> = recs.iter().map(|r| tokenize(&r.text)).collect();
        rows.push(MetricRow {
            video_id: id.to_owned(),
            report: score_story(&story, &refs[id], &idf)?,
        });
    }
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.report.clone()).collect();
    Ok((rows, MetricReport::mean(&reports)))
}

fn cmd_evaluate(stories: &Path, data: &Path, out_dir: Option<&Path>, args: &ConfigArgs, out: &mut dyn Write) -> Result<Status> {
    let dataset = Dataset::load(data, &resolve_config(args, None)?.rules())?;
    let mut records = Vec::new();
    for f in story_files(stories)? {
        records.extend(read_story_records(&f)?);
    }
    let (rows, mean) = evaluate_stories(&records, &dataset)?;
    let mut all = rows.clone();
    all.push(MetricRow {
        video_id: "mean".to_owned(),
        report: mean.clone(),
    });
    write_reports_csv(&mut *out, &all)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("metrics.csv");
        write_reports_csv(std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?, &all)?;
        let json = serde_json::json!({ "videos": rows, "mean": mean });
        let json_path = dir.join("metrics.json");
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&json).map_err(|e| Error::json("metrics", e))?,
        )
        .map_err(|e| Error::io(&json_path, e))?;
    }
    Ok(Status::Ok)
}

fn cmd_gradcheck(seed: u64, instances: usize, out: &mut dyn Write) -> Result<Status> {
    if instances == 0 {
        return Err(Error::InvalidConfig("instances must be at least 1".into()));
    }
    let rows = run_suite(seed, instances)?;
    write_out(
        out,
        format_args!("{:<14} {:>8} {:>7} {:>12}  result\n", "loss", "instance", "params", "max rel err"),
    )?;
    for r in &rows {
        write_out(
            out,
            format_args!(
                "{:<14} {:>8} {:>7} {:>12.3e}  {}\n",
                r.loss,
                r.instance,
                r.params,
                r.max_rel_error,
                if r.passed { "pass" } else { "FAIL" }
            ),
        )?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    write_out(out, format_args!("{} of {} checks passed\n", rows.len() - failed, rows.len()))?;
    if failed > 0 {
        return Err(Error::validation("gradcheck", format!("{failed} checks exceeded the tolerance")));
    }
    Ok(Status::Ok)
}
