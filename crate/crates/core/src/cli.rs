//! The `dscls` command line and its HTTP endpoint.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime
//! failures. Every error is printed as a single `error: ...` line on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ablation::{self, AblationSpec, RunConfig, TableFormat, Variant};
use crate::data::{self, LabeledExample, PredictionRow, SplitSize, SplitSpec, TaskSchema};
use crate::engine::{self, Checkpoint, OptimSnapshot, TrainConfig};
use crate::metrics::{self, ReportStyle};
use crate::model::ModelConfig;
use crate::tokenizer::{self, Vocabulary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::runtime(e)
            }
        }
    )*};
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    data::DataError,
    engine::EngineError,
    tokenizer::TokenizerError,
    ablation::AblationError,
    metrics::MetricsError
);

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "dscls", version, about = "Train, evaluate and serve a desk-scale text classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn a byte-level BPE vocabulary.
    TokenizerTrain(TokenizerTrainArgs),
    /// Fine-tune a classifier and write a checkpoint, run log and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled data.
    Eval(EvalArgs),
    /// Write per-text predictions as CSV.
    Predict(PredictArgs),
    /// Run the baseline and one-factor variants and tabulate the results.
    Ablate(AblateArgs),
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Serve `POST /classify` and `GET /healthz`.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct TokenizerTrainArgs {
    /// CSV file (text column used) or plain text with one document per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long, default_value = "text")]
    pub text_column: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct Columns {
    #[arg(long, default_value = "text")]
    pub text_column: String,
    #[arg(long, default_value = "label")]
    pub label_column: String,
}

/// Configuration sources shared by `train` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON file with optional `model` and `train` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Existing vocabulary; otherwise one is learned from the training texts.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub vocab_size: usize,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch")]
    pub train_batch: Option<usize>,
    #[arg(long)]
    pub eval_batch: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long = "lr")]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, env = "DSCLS_SEED")]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["weighted_f1", "accuracy"])]
    pub selection_metric: Option<String>,
    #[arg(long, value_parser = ["best", "last"])]
    pub select: Option<String>,
    #[arg(long)]
    pub freeze_encoder: bool,

    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    /// Positional capacity of the model; defaults to `--max-len`.
    #[arg(long)]
    pub positions: Option<usize>,
    #[arg(long)]
    pub head_dropout: Option<f64>,
    #[arg(long)]
    pub encoder_dropout: Option<f64>,
    #[arg(long, value_parser = ["scalar_sigmoid", "softmax"])]
    pub head_mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "from_manifest")]
    pub task: Option<TaskSchema>,
    #[arg(long, requires = "valid", conflicts_with = "data")]
    pub train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub valid: Option<PathBuf>,
    /// Optional held-out file; its metrics are written to `test_metrics.json`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Single labeled file split 70/15/15 with a seeded shuffle.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed of the single-file split; defaults to the training seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Replays a previous run exactly; input digests must match.
    #[arg(long, conflicts_with_all = ["task", "train", "valid", "test", "data", "config"])]
    pub from_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub columns: Columns,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "table3", value_parser = ["table3", "json", "ablation_row"])]
    pub report: String,
    #[command(flatten)]
    pub columns: Columns,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "text")]
    pub text_column: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub task: TaskSchema,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Extra column as `name=field:value`, e.g. `"Epochs (5)=epochs:5"`.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Also write `ablation.tex`.
    #[arg(long)]
    pub latex: bool,
    #[command(flatten)]
    pub columns: Columns,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub task: TaskSchema,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separability: f64,
    #[arg(long, env = "DSCLS_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed on startup.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("invalid arguments");
                    eprintln!("error: {}", first.trim_start_matches("error: "));
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message.replace('\n', " "));
            e.code
        }
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::TokenizerTrain(a) => tokenizer_train(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("missing file '{}'", path.display())))
    }
}

fn tokenizer_train(a: TokenizerTrainArgs) -> CliResult<()> {
    require_file(&a.corpus)?;
    let texts = if a.corpus.extension().is_some_and(|e| e == "csv") {
        data::load_texts(&a.corpus, &a.text_column)?
    } else {
        std::fs::read_to_string(&a.corpus)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect()
    };
    if a.vocab_size < tokenizer::MIN_VOCAB {
        return Err(CliError::usage(format!("--vocab-size must be at least {}", tokenizer::MIN_VOCAB)));
    }
    let vocab = tokenizer::train_vocab(&texts, a.vocab_size)?;
    vocab.save(&a.out)?;
    println!("vocabulary of {} tokens written to {}", vocab.size(), a.out.display());
    Ok(())
}

/// Recursively merges `patch` into `base`; non-object values replace.
fn overlay(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                overlay(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Partial `model`/`train` objects from the config file and flags, in that
/// order of precedence (flags win).
struct Overrides {
    model: Value,
    train: Value,
}

impl ConfigArgs {
    fn overrides(&self) -> CliResult<Overrides> {
        let mut model = json!({});
        let mut train = json!({});
        if let Some(path) = &self.config {
            require_file(path)?;
            let file: Value = serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| CliError::usage(format!("invalid config file: {e}")))?;
            let obj = file
                .as_object()
                .ok_or_else(|| CliError::usage("config file must hold a JSON object"))?;
            for key in obj.keys() {
                if key != "model" && key != "train" {
                    return Err(CliError::usage(format!("unknown config section '{key}'")));
                }
            }
            if let Some(m) = obj.get("model") {
                overlay(&mut model, m);
            }
            if let Some(t) = obj.get("train") {
                overlay(&mut train, t);
            }
        }
        let set = |target: &mut Value, key: &str, v: Option<Value>| {
            if let Some(v) = v {
                target[key] = v;
            }
        };
        set(&mut train, "epochs", self.epochs.map(Value::from));
        set(&mut train, "train_batch", self.train_batch.map(Value::from));
        set(&mut train, "eval_batch", self.eval_batch.map(Value::from));
        set(&mut train, "max_len", self.max_len.map(Value::from));
        set(&mut train, "base_lr", self.base_lr.map(Value::from));
        set(&mut train, "warmup_fraction", self.warmup_fraction.map(Value::from));
        set(&mut train, "clip_norm", self.clip_norm.map(Value::from));
        set(&mut train, "weight_decay", self.weight_decay.map(Value::from));
        set(&mut train, "seed", self.seed.map(Value::from));
        set(&mut train, "selection_metric", self.selection_metric.clone().map(Value::from));
        set(&mut train, "select", self.select.clone().map(Value::from));
        set(&mut train, "freeze_encoder", self.freeze_encoder.then_some(Value::Bool(true)));
        set(&mut model, "hidden", self.hidden.map(Value::from));
        set(&mut model, "layers", self.layers.map(Value::from));
        set(&mut model, "heads", self.heads.map(Value::from));
        set(&mut model, "ffn", self.ffn.map(Value::from));
        set(&mut model, "max_len", self.positions.map(Value::from));
        set(&mut model, "dropout", self.head_dropout.map(Value::from));
        set(&mut model, "encoder_dropout", self.encoder_dropout.map(Value::from));
        set(&mut model, "head_mode", self.head_mode.clone().map(Value::from));
        Ok(Overrides { model, train })
    }
}

impl Overrides {
    fn train_config(&self) -> CliResult<TrainConfig> {
        let mut base = serde_json::to_value(TrainConfig::default())?;
        overlay(&mut base, &self.train);
        let cfg: TrainConfig =
            serde_json::from_value(base).map_err(|e| CliError::usage(format!("invalid train config: {e}")))?;
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Desk-scale defaults sized to the vocabulary, task and sequence length.
    fn model_config(&self, vocab: &Vocabulary, task: TaskSchema, train: &TrainConfig) -> CliResult<ModelConfig> {
        let mut defaults = ModelConfig::desk(vocab.size(), task.num_classes());
        defaults.max_len = train.max_len;
        let mut base = serde_json::to_value(defaults)?;
        overlay(&mut base, &self.model);
        let cfg: ModelConfig =
            serde_json::from_value(base).map_err(|e| CliError::usage(format!("invalid model config: {e}")))?;
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        if cfg.vocab_size < vocab.size() {
            return Err(CliError::usage("model vocab_size is smaller than the vocabulary"));
        }
        if cfg.num_classes != task.num_classes() {
            return Err(CliError::usage(format!("{task} has {} classes", task.num_classes())));
        }
        if cfg.max_len < train.max_len {
            return Err(CliError::usage("model positions must cover max_len"));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn digest(path: &Path) -> CliResult<InputDigest> {
    require_file(path)?;
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let hex = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(InputDigest {
        path: std::path::absolute(path)?,
        sha256: hex,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum VocabSource {
    Learned { target_size: usize },
    File(InputDigest),
}

/// Resolved configuration and input digests of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub task: TaskSchema,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabSource,
    pub columns: BTreeMap<String, String>,
    /// `train`, `valid`, optionally `test`, or `data` with `split`.
    pub inputs: BTreeMap<String, InputDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<Variant>>,
}

impl RunManifest {
    fn verify_inputs(&self) -> CliResult<()> {
        let files = self.inputs.values().chain(match &self.vocab {
            VocabSource::File(d) => Some(d),
            VocabSource::Learned { .. } => None,
        });
        for recorded in files {
            let now = digest(&recorded.path)?;
            if now.sha256 != recorded.sha256 {
                return Err(CliError::runtime(format!(
                    "input '{}' changed since the manifest was written",
                    recorded.path.display()
                )));
            }
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_labeled(path: &Path, columns: &BTreeMap<String, String>, task: TaskSchema) -> CliResult<Vec<LabeledExample>> {
    require_file(path)?;
    Ok(data::load_csv(path, &columns["text"], &columns["label"], task)?)
}

fn columns_map(c: &Columns) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("text".to_string(), c.text_column.clone()),
        ("label".to_string(), c.label_column.clone()),
    ])
}

fn obtain_vocab(source: &VocabSource, texts: &[LabeledExample]) -> CliResult<Vocabulary> {
    match source {
        VocabSource::File(d) => Ok(Vocabulary::load(&d.path)?),
        VocabSource::Learned { target_size } => {
            let texts: Vec<&str> = texts.iter().map(|e| e.text.as_str()).collect();
            Ok(tokenizer::train_vocab(&texts, *target_size)?)
        }
    }
}

fn vocab_source(args: &ConfigArgs) -> CliResult<VocabSource> {
    match &args.vocab {
        Some(path) => Ok(VocabSource::File(digest(path)?)),
        None if args.vocab_size < tokenizer::MIN_VOCAB => Err(CliError::usage(format!(
            "--vocab-size must be at least {}",
            tokenizer::MIN_VOCAB
        ))),
        None => Ok(VocabSource::Learned {
            target_size: args.vocab_size,
        }),
    }
}

/// Builds the manifest of a fresh `train` invocation.
fn train_manifest(a: &TrainArgs) -> CliResult<RunManifest> {
    let task = a.task.ok_or_else(|| CliError::usage("--task is required"))?;
    let overrides = a.config.overrides()?;
    let train_cfg = overrides.train_config()?;
    let columns = columns_map(&a.columns);
    let mut inputs = BTreeMap::new();
    let mut split = None;
    match (&a.train, &a.valid, &a.data) {
        (Some(t), Some(v), None) => {
            inputs.insert("train".to_string(), digest(t)?);
            inputs.insert("valid".to_string(), digest(v)?);
        }
        (None, None, Some(d)) => {
            inputs.insert("data".to_string(), digest(d)?);
            split = Some(SplitSpec {
                train: SplitSize::Fraction(0.7),
                valid: SplitSize::Fraction(0.15),
                test: SplitSize::Fraction(0.15),
                seed: a.split_seed.unwrap_or(train_cfg.seed),
            });
        }
        _ => return Err(CliError::usage("give either --train and --valid, or --data")),
    }
    if let Some(t) = &a.test {
        inputs.insert("test".to_string(), digest(t)?);
    }
    let vocab = vocab_source(&a.config)?;
    // The model config depends on the vocabulary size, so the vocabulary is
    // resolved here and again (identically) when the manifest is executed.
    let (train_data, _, _) = manifest_data(&inputs, split.as_ref(), &columns, task)?;
    let vocabulary = obtain_vocab(&vocab, &train_data)?;
    let model = overrides.model_config(&vocabulary, task, &train_cfg)?;
    Ok(RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: "train".to_string(),
        task,
        seed: train_cfg.seed,
        model,
        train: train_cfg,
        vocab,
        columns,
        inputs,
        split,
        variants: None,
    })
}

type Splits = (Vec<LabeledExample>, Vec<LabeledExample>, Option<Vec<LabeledExample>>);

fn manifest_data(
    inputs: &BTreeMap<String, InputDigest>,
    split: Option<&SplitSpec>,
    columns: &BTreeMap<String, String>,
    task: TaskSchema,
) -> CliResult<Splits> {
    let explicit_test = match inputs.get("test") {
        Some(t) => Some(load_labeled(&t.path, columns, task)?),
        None => None,
    };
    match (inputs.get("data"), split) {
        (Some(d), Some(spec)) => {
            let all = load_labeled(&d.path, columns, task)?;
            let (tr, va, te) = data::split(&all, spec)?;
            Ok((tr, va, explicit_test.or((!te.is_empty()).then_some(te))))
        }
        _ => {
            let get = |k: &str| {
                inputs
                    .get(k)
                    .ok_or_else(|| CliError::runtime(format!("manifest lacks the '{k}' input")))
            };
            let tr = load_labeled(&get("train")?.path, columns, task)?;
            let va = load_labeled(&get("valid")?.path, columns, task)?;
            Ok((tr, va, explicit_test))
        }
    }
}

/// Trains exactly as `manifest` describes and writes every artifact to `out`.
pub fn execute_train(manifest: &RunManifest, out: &Path) -> CliResult<()> {
    let (train_data, valid_data, test_data) =
        manifest_data(&manifest.inputs, manifest.split.as_ref(), &manifest.columns, manifest.task)?;
    let vocab = obtain_vocab(&manifest.vocab, &train_data)?;
    let outcome = engine::train(&vocab, &manifest.model, &train_data, &valid_data, &manifest.train)?;
    let mut log = outcome.log;
    engine::label_reports(&mut log, manifest.task);

    std::fs::create_dir_all(out)?;
    let ckpt = Checkpoint {
        model: manifest.model.clone(),
        train: manifest.train.clone(),
        task: manifest.task,
        vocab,
        params: outcome.params,
        optim: Some(OptimSnapshot::from(&outcome.optim)),
    };
    engine::save_checkpoint(&out.join("model.ckpt"), &ckpt)?;
    ckpt.vocab.save(&out.join("vocab.json"))?;
    std::fs::write(out.join("run_log.jsonl"), log.to_jsonl())?;
    write_json(&out.join("timings.json"), &json!({ "epoch_wall_seconds": outcome.wall_times }))?;
    write_json(&out.join("manifest.json"), manifest)?;
    if let Some(test) = test_data {
        let report = ckpt.evaluate(&test)?;
        std::fs::write(out.join("test_metrics.json"), report.to_json() + "\n")?;
    }
    let best = log.best();
    println!(
        "best epoch {} of {}: accuracy {:.4}, weighted F1 {:.4}",
        best.epoch,
        log.epochs.len(),
        best.validation.accuracy,
        best.validation.weighted.f1
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let manifest = match &a.from_manifest {
        Some(path) => {
            require_file(path)?;
            let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| CliError::usage(format!("invalid manifest: {e}")))?;
            m.verify_inputs()?;
            m
        }
        None => train_manifest(&a)?,
    };
    execute_train(&manifest, &a.out)
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    require_file(path)?;
    Ok(engine::load_checkpoint(path)?)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let ckpt = load_ckpt(&a.checkpoint)?;
    let examples = load_labeled(&a.data, &columns_map(&a.columns), ckpt.task)?;
    let report = ckpt.evaluate(&examples)?;
    let style = match a.report.as_str() {
        "table3" => ReportStyle::Table3,
        "ablation_row" => ReportStyle::AblationRow,
        _ => ReportStyle::Json,
    };
    let text = metrics::render(&report, style);
    print!("{text}");
    if !text.ends_with('\n') {
        println!();
    }
    Ok(())
}

fn predict(a: PredictArgs) -> CliResult<()> {
    let ckpt = load_ckpt(&a.checkpoint)?;
    require_file(&a.input)?;
    let texts = data::load_texts(&a.input, &a.text_column)?;
    let rows: Vec<PredictionRow> = ckpt
        .predict(&texts)?
        .into_iter()
        .enumerate()
        .map(|(index, p)| PredictionRow {
            index,
            label: p.label,
            confidence: p.confidence,
        })
        .collect();
    data::write_predictions(std::fs::File::create(&a.out)?, &rows)?;
    println!("{} predictions written to {}", rows.len(), a.out.display());
    Ok(())
}

/// Parses `name=field:value`; the value is read as JSON when it parses,
/// otherwise as a string.
pub fn parse_variant(raw: &str) -> CliResult<Variant> {
    let bad = || CliError::usage(format!("variant '{raw}' is not of the form name=field:value"));
    let (name, rest) = raw.rsplit_once('=').ok_or_else(bad)?;
    let (field, value) = rest.split_once(':').ok_or_else(bad)?;
    if name.is_empty() || field.is_empty() || value.is_empty() {
        return Err(bad());
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok(Variant::new(name, field, value))
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let overrides = a.config.overrides()?;
    let train_cfg = overrides.train_config()?;
    let columns = columns_map(&a.columns);
    let inputs = BTreeMap::from([
        ("train".to_string(), digest(&a.train)?),
        ("valid".to_string(), digest(&a.valid)?),
    ]);
    let train_data = load_labeled(&a.train, &columns, a.task)?;
    let valid_data = load_labeled(&a.valid, &columns, a.task)?;
    let vocab_src = vocab_source(&a.config)?;
    let vocab = obtain_vocab(&vocab_src, &train_data)?;
    let model = overrides.model_config(&vocab, a.task, &train_cfg)?;

    let mut spec = AblationSpec::with_defaults(RunConfig {
        model: model.clone(),
        train: train_cfg.clone(),
    });
    for raw in &a.variants {
        spec.variants.push(parse_variant(raw)?);
    }
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let mut outcome = ablation::run_ablation(&spec, &vocab, &train_data, &valid_data)?;
    for run in &mut outcome.runs {
        if let Ok(log) = &mut run.outcome {
            engine::label_reports(log, a.task);
        }
    }
    ablation::write_outputs(&a.out, &outcome)?;
    if a.latex {
        std::fs::write(a.out.join("ablation.tex"), outcome.table.render(TableFormat::Latex))?;
    }
    write_json(
        &a.out.join("manifest.json"),
        &RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: "ablate".to_string(),
            task: a.task,
            seed: train_cfg.seed,
            model,
            train: train_cfg,
            vocab: vocab_src,
            columns,
            inputs,
            split: None,
            variants: Some(spec.variants.clone()),
        },
    )?;
    print!("{}", outcome.table.render(TableFormat::Markdown));
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let corpus = data::synth_corpus(a.task, a.n, a.seed, a.separability).map_err(|e| CliError::usage(e.to_string()))?;
    data::save_csv(&a.out, &corpus, a.task)?;
    println!("{} examples written to {}", corpus.len(), a.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct ClassifyRequest {
    texts: Vec<String>,
}

/// Response body for a `POST /classify` request body, or a 400 message.
pub fn classify_json(ckpt: &Checkpoint, body: &str) -> std::result::Result<String, String> {
    let req: ClassifyRequest = serde_json::from_str(body).map_err(|e| format!("invalid request: {e}"))?;
    let results = ckpt.predict(&req.texts).map_err(|e| e.to_string())?;
    Ok(json!({ "results": results }).to_string())
}

fn respond(req: tiny_http::Request, status: u16, body: String) {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let response = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(header);
    // A client that hung up is not a server error.
    let _ = req.respond(response);
}

fn handle(ckpt: &Checkpoint, mut req: tiny_http::Request) {
    use tiny_http::Method;
    let path = req.url().split('?').next().unwrap_or("").to_string();
    match (req.method(), path.as_str()) {
        (Method::Get, "/healthz") => respond(req, 200, r#"{"status":"ok"}"#.to_string()),
        (Method::Post, "/classify") => {
            let mut body = String::new();
            if req.as_reader().read_to_string(&mut body).is_err() {
                return respond(req, 400, json!({ "error": "body is not UTF-8" }).to_string());
            }
            match classify_json(ckpt, &body) {
                Ok(out) => respond(req, 200, out),
                Err(e) => respond(req, 400, json!({ "error": e }).to_string()),
            }
        }
        (_, "/healthz" | "/classify") => respond(req, 405, json!({ "error": "method not allowed" }).to_string()),
        _ => respond(req, 404, json!({ "error": "not found" }).to_string()),
    }
}

/// Serves requests on `addr` with `workers` threads sharing one read-only
/// checkpoint. `on_ready` receives the bound address. Blocks forever.
pub fn serve(ckpt: Checkpoint, addr: &str, workers: usize, on_ready: impl FnOnce(SocketAddr)) -> CliResult<()> {
    let server = tiny_http::Server::http(addr).map_err(|e| CliError::runtime(format!("cannot bind {addr}: {e}")))?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| CliError::runtime("server is not bound to an IP address"))?;
    on_ready(bound);
    let server = Arc::new(server);
    let ckpt = Arc::new(ckpt);
    let handles: Vec<_> = (0..workers.max(1))
        .map(|_| {
            let (server, ckpt) = (Arc::clone(&server), Arc::clone(&ckpt));
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle(&ckpt, req);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| CliError::runtime("server worker panicked"))?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult<()> {
    let ckpt = load_ckpt(&a.checkpoint)?;
    serve(ckpt, &format!("{}:{}", a.host, a.port), a.workers, |addr| {
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    })
}
