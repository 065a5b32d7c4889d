//! Command-line front end: `synth`, `pretrain`, `gen-candidates`, `finetune`,
//! `evaluate`, `report` and `grad-check`.
//!
//! Every subcommand resolves its configuration as defaults, then an optional
//! `--config` JSON file (a bare object or a previous run's `manifest.json`),
//! then explicit flags. The resolved configuration is written to
//! `<out-dir>/manifest.json` before any work starts, so a run can be repeated
//! with `--config <old>/manifest.json --out-dir <new>`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{generate_synthetic, load_corpus, load_human_eval, save_corpus, ExamplePair, SynthConfig};
use crate::crl::CrlConfig;
use crate::decoding::BeamConfig;
use crate::error::Error;
use crate::evaluator::{
    aggregate_human_eval, evaluate_examples, mean_scores, render_report, AutoScores, EvalReport, ReportRow,
    ReportStyle,
};
use crate::metrics::{MetricKind, MetricSuite};
use crate::model::{
    finite_difference_check, load_checkpoint, save_checkpoint, Checkpoint, LossSpec, MleOptions, ModelConfig,
    Optimizer, SeqModel, TrainItem,
};
use crate::trainer::{
    finetune, generate_candidate_sets, load_candidate_sets, pretrain_base, save_candidate_sets,
    EpochRecord, PretrainConfig, TrainConfig,
};
use crate::vocab::{TokenSequence, Vocabulary, EOS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Metrics every candidate is scored with, so one candidate file serves all three systems.
pub const SYSTEM_METRICS: [MetricKind; 3] = [MetricKind::RougeMean, MetricKind::BartLike, MetricKind::DaeLike];

/// Failure of a CLI run, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) if e.is_divergence() => EXIT_DIVERGENCE,
            CliError::Core(Error::InvalidConfig(_) | Error::BeamGroups { .. }) => EXIT_USAGE,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "crlsum", version, about = "Contrastive reward learning for summarization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus split into train/valid/test.
    Synth(SynthArgs),
    /// MLE-train a model (the base summarizer or the likelihood scorer).
    Pretrain(PretrainArgs),
    /// Decode training documents with diverse beam search and score the candidates.
    GenCandidates(GenArgs),
    /// Fine-tune a base model with the combined contrastive objective.
    Finetune(FinetuneArgs),
    /// Decode the test split and compute every automatic metric.
    Evaluate(EvaluateArgs),
    /// Render a results table from evaluation outputs and optional human judgments.
    Report(ReportArgs),
    /// Compare analytic and finite-difference gradients on a small random model.
    GradCheck(GradCheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::GenCandidates(_) => "gen-candidates",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
            Command::GradCheck(_) => "grad-check",
        }
    }
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// JSON configuration file or manifest of an earlier run.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Fresh directory receiving the manifest and all outputs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub valid_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub facts_per_doc: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Directory written by `synth` (or holding vocab.txt and split files).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub context_window: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub target_loss: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Base model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Likelihood scorer checkpoint for the bart-like metric.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Candidates per document (the total beam width).
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub beam_groups: Option<usize>,
    #[arg(long)]
    pub diversity: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub max_length: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Candidate file written by `gen-candidates`.
    #[arg(long)]
    pub candidate_file: Option<PathBuf>,
    /// rouge, bart-like or dae-like.
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<MetricKind>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub valid_size: Option<usize>,
    /// Candidates per document used in the contrastive loss.
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Row label in reports.
    #[arg(long)]
    pub system: Option<String>,
    /// Split to evaluate: train, valid or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_length: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// `scores.json` files written by `evaluate`, one per row.
    #[arg(long, num_args = 1..)]
    pub scores: Option<Vec<PathBuf>>,
    /// Human-evaluation CSV to merge by system name.
    #[arg(long)]
    pub human: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub facts_per_doc: usize,
    pub vocab_size: usize,
}

impl Default for SynthRun {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthRun {
            out_dir: None,
            seed: s.seed,
            train_size: 1000,
            valid_size: 200,
            test_size: 200,
            facts_per_doc: s.facts_per_doc,
            vocab_size: s.vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRun {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub hidden: usize,
    pub context_window: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub target_loss: Option<f64>,
    pub optimizer: Optimizer,
}

impl Default for PretrainRun {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainRun {
            out_dir: None,
            seed: 7,
            data: None,
            hidden: 32,
            context_window: 64,
            temperature: 1.0,
            epochs: 7,
            lr: p.learning_rate,
            batch_size: p.batch_size,
            target_loss: None,
            optimizer: p.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenRun {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub scorer: Option<PathBuf>,
    pub candidates: usize,
    pub beam_groups: usize,
    pub diversity: f64,
    pub alpha: f64,
    pub train_size: usize,
    pub max_length: usize,
}

impl Default for GenRun {
    fn default() -> Self {
        GenRun {
            out_dir: None,
            seed: 7,
            data: None,
            model: None,
            scorer: None,
            candidates: 8,
            beam_groups: 8,
            diversity: 1.0,
            alpha: CrlConfig::default().alpha,
            train_size: 1000,
            max_length: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRun {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub scorer: Option<PathBuf>,
    pub candidate_file: Option<PathBuf>,
    pub metric: MetricKind,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub lr: f64,
    pub train_size: usize,
    pub valid_size: usize,
    pub candidates: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub valid_beam_width: usize,
    pub max_length: usize,
    pub optimizer: Optimizer,
}

impl Default for FinetuneRun {
    fn default() -> Self {
        let t = TrainConfig::default();
        FinetuneRun {
            out_dir: None,
            seed: t.seed,
            data: None,
            model: None,
            scorer: None,
            candidate_file: None,
            metric: t.metric,
            gamma: t.gamma,
            lambda: t.lambda,
            alpha: t.alpha,
            lr: t.learning_rate,
            train_size: t.num_train,
            valid_size: t.num_valid,
            candidates: t.candidates_per_doc,
            patience: t.patience,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            valid_beam_width: t.valid_beam_width,
            max_length: t.max_length,
            optimizer: t.optimizer,
        }
    }
}

impl FinetuneRun {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            metric: self.metric,
            num_train: self.train_size,
            num_valid: self.valid_size,
            learning_rate: self.lr,
            gamma: self.gamma,
            lambda: self.lambda,
            alpha: self.alpha,
            candidates_per_doc: self.candidates,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            batch_size: self.batch_size,
            valid_beam_width: self.valid_beam_width,
            max_length: self.max_length,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRun {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub scorer: Option<PathBuf>,
    pub system: String,
    pub split: String,
    pub beam_width: usize,
    pub max_length: usize,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        EvaluateRun {
            out_dir: None,
            seed: 7,
            data: None,
            model: None,
            scorer: None,
            system: "system".into(),
            split: "test".into(),
            beam_width: 4,
            max_length: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRun {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub scores: Vec<PathBuf>,
    pub human: Option<PathBuf>,
    pub dataset: String,
}

impl Default for ReportRun {
    fn default() -> Self {
        ReportRun {
            out_dir: None,
            seed: 0,
            scores: Vec::new(),
            human: None,
            dataset: "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckRun {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub hidden: usize,
    pub vocab_size: usize,
    pub context_window: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub candidates: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckRun {
    fn default() -> Self {
        let crl = CrlConfig::default();
        GradCheckRun {
            out_dir: None,
            seed: 7,
            hidden: 16,
            vocab_size: 12,
            context_window: 16,
            gamma: crl.gamma,
            lambda: crl.lambda,
            alpha: crl.alpha,
            candidates: 3,
            step: 1e-5,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run: the command, its fully resolved
/// configuration, and checksums of what it read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: BTreeMap<String, FileRecord>,
    pub complete: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&body).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_record(path: &Path) -> CliResult<FileRecord> {
    Ok(FileRecord {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

/// Overlays `top` onto `base`, key by key.
fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        base.insert(k, v);
    }
}

fn object(value: Value, what: &str) -> CliResult<Map<String, Value>> {
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage(format!("{what} must be a JSON object"))),
    }
}

/// Defaults < config file < flags.
fn resolve<C, A>(command: &str, args: &A, config: Option<&Path>) -> CliResult<C>
where
    C: Default + Serialize + DeserializeOwned,
    A: Serialize,
{
    let mut merged = object(serde_json::to_value(C::default()).expect("config serializes"), "defaults")?;
    if let Some(path) = config {
        let body = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let value: Value =
            serde_json::from_str(&body).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut file = object(value, "config file")?;
        if file.contains_key("command") && file.contains_key("config") {
            let recorded = file.get("command").and_then(Value::as_str).unwrap_or_default();
            if recorded != command {
                return Err(CliError::Usage(format!(
                    "{} is a `{recorded}` manifest, not `{command}`",
                    path.display()
                )));
            }
            file = object(file.remove("config").expect("checked"), "manifest config")?;
        }
        overlay(&mut merged, file);
    }
    let flags = object(serde_json::to_value(args).expect("args serialize"), "flags")?;
    overlay(&mut merged, flags.into_iter().filter(|(_, v)| !v.is_null()).collect());
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("configuration: {e}")))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

/// An output directory that did not exist or was empty.
struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    fn create<C: Serialize>(
        command: &str,
        out_dir: Option<&Path>,
        seed: u64,
        config: &C,
        inputs: &[(&str, &Path)],
    ) -> CliResult<Self> {
        let dir = out_dir.ok_or_else(|| CliError::Usage("--out-dir is required".into()))?;
        if dir.exists() {
            let mut entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
            if entries.next().is_some() {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty; every run needs a fresh directory",
                    dir.display()
                )));
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut recorded = BTreeMap::new();
        for (name, path) in inputs {
            recorded.insert(name.to_string(), file_record(path)?);
        }
        let run = RunDir {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config: serde_json::to_value(config).expect("config serializes"),
                inputs: recorded,
                outputs: BTreeMap::new(),
                complete: false,
            },
        };
        run.write_manifest()?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_manifest(&self) -> CliResult<()> {
        let path = self.path(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, body + "\n").map_err(|e| Error::Io { path, source: e })?;
        Ok(())
    }

    fn write(&mut self, name: &str, body: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, body).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }

    /// Records checksums of the named outputs and marks the run complete.
    fn finish(mut self, outputs: &[&str]) -> CliResult<()> {
        for name in outputs {
            let record = file_record(&self.path(name))?;
            self.manifest.outputs.insert(name.to_string(), record);
        }
        self.manifest.complete = true;
        self.write_manifest()
    }
}

/// Vocabulary and splits of a data directory.
struct Dataset {
    vocab: Vocabulary,
    dir: PathBuf,
}

impl Dataset {
    fn open(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::Data(format!("data directory {} does not exist", dir.display())));
        }
        Ok(Dataset {
            vocab: Vocabulary::load(&dir.join(VOCAB_FILE))?,
            dir: dir.to_path_buf(),
        })
    }

    fn split_path(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.jsonl"))
    }

    fn split(&self, split: &str) -> CliResult<Vec<ExamplePair>> {
        if !SPLITS.contains(&split) {
            return Err(CliError::Usage(format!("unknown split `{split}`; expected one of {SPLITS:?}")));
        }
        let pairs = load_corpus(&self.split_path(split), &self.vocab)?;
        if pairs.is_empty() {
            return Err(CliError::Data(format!("split `{split}` is empty")));
        }
        Ok(pairs)
    }
}

fn load_model(path: &Path, vocab: &Vocabulary) -> CliResult<SeqModel> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config.vocab_size != vocab.len() {
        return Err(CliError::Data(format!(
            "{} was trained on a vocabulary of {} tokens, data has {}",
            path.display(),
            ckpt.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(ckpt.to_model(None)?)
}

fn take<'a>(pairs: &'a [ExamplePair], n: usize, what: &str) -> CliResult<&'a [ExamplePair]> {
    if n > pairs.len() {
        return Err(CliError::Data(format!("{what} size {n} exceeds the {} available examples", pairs.len())));
    }
    Ok(&pairs[..n])
}

fn run_synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg: SynthRun = resolve("synth", args, args.common.config.as_deref())?;
    let mut run = RunDir::create("synth", cfg.out_dir.as_deref(), cfg.seed, &cfg, &[])?;
    let corpus = generate_synthetic(&SynthConfig {
        num_examples: cfg.train_size + cfg.valid_size + cfg.test_size,
        facts_per_doc: cfg.facts_per_doc,
        vocab_size: cfg.vocab_size,
        seed: cfg.seed,
    })?;
    corpus.vocab.save(&run.path(VOCAB_FILE))?;
    let (train, rest) = corpus.pairs.split_at(cfg.train_size);
    let (valid, test) = rest.split_at(cfg.valid_size);
    let mut names = vec![VOCAB_FILE.to_string()];
    for (split, pairs) in SPLITS.iter().zip([train, valid, test]) {
        let name = format!("{split}.jsonl");
        save_corpus(&run.path(&name), pairs, &corpus.vocab)?;
        names.push(name);
    }
    run.write(
        "README.txt",
        b"vocab.txt holds one word per line; split files hold one {id, document, reference} JSON record per line.\n",
    )?;
    let _ = writeln!(
        out,
        "wrote {} / {} / {} examples over {} tokens to {}",
        train.len(),
        valid.len(),
        test.len(),
        corpus.vocab.len(),
        run.dir.display()
    );
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    run.finish(&names)
}

fn run_pretrain(args: &PretrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg: PretrainRun = resolve("pretrain", args, args.common.config.as_deref())?;
    let data_dir = required(&cfg.data, "data")?;
    let data = Dataset::open(data_dir)?;
    let train_path = data.split_path("train");
    let vocab_path = data_dir.join(VOCAB_FILE);
    let mut run = RunDir::create(
        "pretrain",
        cfg.out_dir.as_deref(),
        cfg.seed,
        &cfg,
        &[("vocab", &vocab_path), ("train", &train_path)],
    )?;
    let train = data.split("train")?;
    let mc = ModelConfig {
        vocab_size: data.vocab.len(),
        hidden_size: cfg.hidden,
        context_window: cfg.context_window,
        temperature: cfg.temperature,
    };
    let pc = PretrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        optimizer: cfg.optimizer,
        target_loss: cfg.target_loss,
    };
    let trained = pretrain_base(SeqModel::new(mc, cfg.seed)?, &train, &pc)?;
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ckpt = Checkpoint::from_model(&trained.model, trained.steps, rng.get_seed(), rng.get_word_pos());
    save_checkpoint(&ckpt, &run.path("model.ckpt"))?;
    let mut log = String::from("epoch\tloss\n");
    for (i, l) in trained.epoch_losses.iter().enumerate() {
        log.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    run.write("losses.tsv", log.as_bytes())?;
    let _ = write!(out, "{log}");
    let _ = writeln!(out, "{} parameters, {} updates", trained.model.num_params(), trained.steps);
    run.finish(&["model.ckpt", "losses.tsv"])
}

fn run_gen(args: &GenArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg: GenRun = resolve("gen-candidates", args, args.common.config.as_deref())?;
    let data_dir = required(&cfg.data, "data")?;
    let model_path = required(&cfg.model, "model")?;
    let scorer_path = required(&cfg.scorer, "scorer")?;
    let data = Dataset::open(data_dir)?;
    let beam = BeamConfig {
        beam_width: cfg.candidates,
        max_length: cfg.max_length,
        num_groups: cfg.beam_groups,
        diversity_strength: cfg.diversity,
        seed: cfg.seed,
    };
    beam.validate()?;
    let train_path = data.split_path("train");
    let vocab_path = data_dir.join(VOCAB_FILE);
    let mut run = RunDir::create(
        "gen-candidates",
        cfg.out_dir.as_deref(),
        cfg.seed,
        &cfg,
        &[("vocab", &vocab_path), ("train", &train_path), ("model", model_path), ("scorer", scorer_path)],
    )?;
    let train = data.split("train")?;
    let train = take(&train, cfg.train_size, "train")?;
    let model = load_model(model_path, &data.vocab)?;
    let scorer = load_model(scorer_path, &data.vocab)?;
    let suite = MetricSuite::new(&data.vocab, Some(&scorer));
    let sets = generate_candidate_sets(&model, train, &beam, &SYSTEM_METRICS, &suite, cfg.alpha)?;
    save_candidate_sets(&run.path("candidates.jsonl"), &sets, &data.vocab)?;
    let total: usize = sets.iter().map(|s| s.candidates.len()).sum();
    run.write(
        "summary.txt",
        format!("documents\t{}\ncandidates\t{total}\n", sets.len()).as_bytes(),
    )?;
    let _ = writeln!(out, "{total} candidates for {} documents", sets.len());
    run.finish(&["candidates.jsonl", "summary.txt"])
}

/// Outcome of `finetune`, written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRecord {
    pub system: String,
    pub metric: MetricKind,
    pub best_epoch: usize,
    pub best_valid_score: f64,
    pub history: Vec<EpochRecord>,
}

fn run_finetune(args: &FinetuneArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg: FinetuneRun = resolve("finetune", args, args.common.config.as_deref())?;
    let data_dir = required(&cfg.data, "data")?;
    let model_path = required(&cfg.model, "model")?;
    let cand_path = required(&cfg.candidate_file, "candidate-file")?;
    let tc = cfg.train_config();
    tc.validate()?;
    let data = Dataset::open(data_dir)?;
    let vocab_path = data_dir.join(VOCAB_FILE);
    let train_path = data.split_path("train");
    let valid_path = data.split_path("valid");
    let mut inputs: Vec<(&str, &Path)> = vec![
        ("vocab", &vocab_path),
        ("train", &train_path),
        ("valid", &valid_path),
        ("model", model_path),
        ("candidates", cand_path),
    ];
    if let Some(s) = cfg.scorer.as_deref() {
        inputs.push(("scorer", s));
    }
    let mut run = RunDir::create("finetune", cfg.out_dir.as_deref(), cfg.seed, &cfg, &inputs)?;
    let train = data.split("train")?;
    let valid = data.split("valid")?;
    let base = load_model(model_path, &data.vocab)?;
    let scorer = cfg.scorer.as_deref().map(|p| load_model(p, &data.vocab)).transpose()?;
    let suite = MetricSuite::new(&data.vocab, scorer.as_ref());
    let sets = load_candidate_sets(cand_path)?;
    let mut log = Vec::new();
    let trained = finetune(&base, &sets, &train, &valid, &suite, &tc, Some(&mut log))?;
    save_checkpoint(&trained.checkpoint, &run.path("model.ckpt"))?;
    run.write("history.tsv", &log)?;
    let record = SystemRecord {
        system: trained.name.clone(),
        metric: cfg.metric,
        best_epoch: trained.best_epoch,
        best_valid_score: trained.best_score(),
        history: trained.history.clone(),
    };
    let body = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
    run.write("system.json", body.as_bytes())?;
    let _ = out.write_all(&log);
    let _ = writeln!(
        out,
        "{}: best epoch {} (valid {} = {:.6})",
        trained.name,
        trained.best_epoch,
        cfg.metric,
        trained.best_score()
    );
    run.finish(&["model.ckpt", "history.tsv", "system.json"])
}

/// Mean scores of one system, written by `evaluate` and read by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub system: String,
    pub split: String,
    pub samples: usize,
    pub scores: AutoScores,
}

fn run_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg: EvaluateRun = resolve("evaluate", args, args.common.config.as_deref())?;
    let data_dir = required(&cfg.data, "data")?;
    let model_path = required(&cfg.model, "model")?;
    let scorer_path = required(&cfg.scorer, "scorer")?;
    let beam = BeamConfig::beam(cfg.beam_width, cfg.max_length);
    beam.validate()?;
    let data = Dataset::open(data_dir)?;
    let vocab_path = data_dir.join(VOCAB_FILE);
    let split_path = data.split_path(&cfg.split);
    let mut run = RunDir::create(
        "evaluate",
        cfg.out_dir.as_deref(),
        cfg.seed,
        &cfg,
        &[("vocab", &vocab_path), ("split", &split_path), ("model", model_path), ("scorer", scorer_path)],
    )?;
    let test = data.split(&cfg.split)?;
    let model = load_model(model_path, &data.vocab)?;
    let scorer = load_model(scorer_path, &data.vocab)?;
    let suite = MetricSuite::new(&data.vocab, Some(&scorer));
    let examples = evaluate_examples(&model, &test, &suite, &beam)?;
    let mut lines = String::new();
    for e in &examples {
        let row = serde_json::json!({
            "id": e.id,
            "summary": data.vocab.decode(&e.summary),
            "scores": e.scores,
        });
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    run.write("examples.jsonl", lines.as_bytes())?;
    let scores = ScoresFile {
        system: cfg.system.clone(),
        split: cfg.split.clone(),
        samples: examples.len(),
        scores: mean_scores(&examples)?,
    };
    let body = serde_json::to_string_pretty(&scores).expect("scores serialize") + "\n";
    run.write("scores.json", body.as_bytes())?;
    let s = scores.scores;
    let _ = writeln!(
        out,
        "{}: R-1 {:.4} R-2 {:.4} R-L {:.4} B {:.4} D {:.4} HAL {:.4} (n = {})",
        cfg.system, s.rouge1, s.rouge2, s.rouge_l, s.bart, s.dae, s.hallucination, scores.samples
    );
    run.finish(&["examples.jsonl", "scores.json"])
}

fn run_report(args: &ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg: ReportRun = resolve("report", args, args.common.config.as_deref())?;
    if cfg.scores.is_empty() {
        return Err(CliError::Usage("--scores needs at least one file".into()));
    }
    let names: Vec<String> = (0..cfg.scores.len()).map(|i| format!("scores{i}")).collect();
    let mut inputs: Vec<(&str, &Path)> = names.iter().map(String::as_str).zip(cfg.scores.iter().map(PathBuf::as_path)).collect();
    if let Some(h) = cfg.human.as_deref() {
        inputs.push(("human", h));
    }
    let mut run = RunDir::create("report", cfg.out_dir.as_deref(), cfg.seed, &cfg, &inputs)?;
    let human = match cfg.human.as_deref() {
        Some(p) => Some(aggregate_human_eval(&load_human_eval(p)?)?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut samples = None;
    for path in &cfg.scores {
        let body = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let file: ScoresFile =
            serde_json::from_str(&body).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        match samples {
            None => samples = Some(file.samples),
            Some(n) if n != file.samples => {
                return Err(CliError::Data(format!(
                    "{} covers {} samples, earlier files cover {n}",
                    path.display(),
                    file.samples
                )))
            }
            Some(_) => {}
        }
        let mut row = ReportRow::from_scores(&file.system, &file.scores);
        row.human = human.as_ref().and_then(|h| h.get(&file.system).copied());
        rows.push(row);
    }
    let report = EvalReport {
        dataset: cfg.dataset.clone(),
        samples: samples.unwrap_or(0),
        rows,
    };
    let text = render_report(&report, ReportStyle::Text);
    run.write("report.txt", text.as_bytes())?;
    run.write("report.csv", render_report(&report, ReportStyle::Delimited).as_bytes())?;
    let _ = write!(out, "{text}");
    run.finish(&["report.txt", "report.csv"])
}

/// Result of `grad-check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutcome {
    pub num_params: usize,
    pub max_relative_error: f64,
    pub worst_slice: String,
    pub passed: bool,
}

/// Random document, reference and `candidates` EOS-terminated candidates over `vocab_size` tokens.
fn random_item(rng: &mut ChaCha8Rng, vocab_size: usize, candidates: usize) -> (TokenSequence, TokenSequence, Vec<TokenSequence>) {
    let mut draw = |len: usize| -> Vec<u32> { (0..len).map(|_| rng.gen_range(3..vocab_size as u32)).collect() };
    let document = draw(8);
    let reference = draw(4);
    let mut cands: Vec<TokenSequence> = Vec::with_capacity(candidates);
    for k in 0..candidates {
        let mut t = draw(2 + k % 3);
        t.push(EOS);
        cands.push(t.into());
    }
    (document.into(), reference.into(), cands)
}

pub fn grad_check(cfg: &GradCheckRun) -> CliResult<GradCheckOutcome> {
    if cfg.vocab_size < 4 {
        return Err(CliError::Usage("grad-check needs --vocab-size >= 4".into()));
    }
    let mc = ModelConfig {
        vocab_size: cfg.vocab_size,
        hidden_size: cfg.hidden,
        context_window: cfg.context_window,
        temperature: 1.0,
    };
    let model = SeqModel::new(mc, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (document, reference, candidates) = random_item(&mut rng, cfg.vocab_size, cfg.candidates);
    let items = [TrainItem {
        document: &document,
        reference: &reference,
        candidates: &candidates,
    }];
    let crl = CrlConfig {
        gamma: cfg.gamma,
        lambda: cfg.lambda,
        alpha: cfg.alpha,
    };
    crl.validate()?;
    let spec = LossSpec {
        items: &items,
        crl,
        mle: MleOptions::TRAINING,
    };
    let report = finite_difference_check(&model, &spec, cfg.step, 1e-6)?;
    Ok(GradCheckOutcome {
        num_params: report.num_params,
        max_relative_error: report.max_relative_error,
        worst_slice: report.worst_slice,
        passed: report.max_relative_error < cfg.tolerance,
    })
}

fn run_grad_check(args: &GradCheckArgs, out: &mut dyn Write) -> CliResult<bool> {
    let cfg: GradCheckRun = resolve("grad-check", args, args.common.config.as_deref())?;
    let mut run = match cfg.out_dir.as_deref() {
        Some(dir) => Some(RunDir::create("grad-check", Some(dir), cfg.seed, &cfg, &[])?),
        None => None,
    };
    let outcome = grad_check(&cfg)?;
    let _ = writeln!(
        out,
        "max relative error {:.3e} over {} parameters (worst in {}): {}",
        outcome.max_relative_error,
        outcome.num_params,
        outcome.worst_slice,
        if outcome.passed { "ok" } else { "FAILED" }
    );
    if let Some(run) = run.as_mut() {
        let body = serde_json::to_string_pretty(&outcome).expect("outcome serializes") + "\n";
        run.write("grad_check.json", body.as_bytes())?;
    }
    if let Some(run) = run {
        run.finish(&["grad_check.json"])?;
    }
    Ok(outcome.passed)
}

/// Runs one command line and returns the process exit code. Diagnostics go to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{rendered}") } else { write!(out, "{rendered}") };
            return code;
        }
    };
    let name = cli.command.name();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a, out),
        Command::Pretrain(a) => run_pretrain(a, out),
        Command::GenCandidates(a) => run_gen(a, out),
        Command::Finetune(a) => run_finetune(a, out),
        Command::Evaluate(a) => run_evaluate(a, out),
        Command::Report(a) => run_report(a, out),
        Command::GradCheck(a) => match run_grad_check(a, out) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "crlsum {name}: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let _ = writeln!(err, "  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
