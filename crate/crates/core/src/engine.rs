//! Fine-tuning loop, evaluation, checkpoints and batch prediction.
//!
//! One step is: train-mode forward → loss (binary cross-entropy on the
//! sigmoid head, softmax cross-entropy otherwise) → backward → global-norm
//! clip → AdamW at the scheduled learning rate. After every epoch the model
//! is evaluated on the validation split and the best epoch (by the selection
//! metric, earliest on ties) is kept.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::data::{self, LabeledExample, TaskSchema};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, Batch, HeadMode, ModelConfig, ModelError, Parameters};
use crate::optim::{AdamWHyper, OptimError, OptimState, Schedule};
use crate::rng::{self, Stream};
use crate::tokenizer::{self, EncodedExample, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("empty {0} data")]
    EmptyData(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("shape mismatch for tensor '{name}': expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("truncated tensor record '{0}'")]
    TruncatedTensor(String),
    #[error("truncated checkpoint header")]
    TruncatedHeader,
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    WeightedF1,
    Accuracy,
}

impl SelectionMetric {
    pub fn of(self, report: &MetricsReport) -> f64 {
        match self {
            SelectionMetric::WeightedF1 => report.weighted.f1,
            SelectionMetric::Accuracy => report.accuracy,
        }
    }
}

/// Which parameters [`train`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Select {
    Best,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    /// Encoded sequence length, specials included.
    pub max_len: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub select: Select,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            train_batch: 16,
            eval_batch: 64,
            max_len: 256,
            base_lr: 2e-5,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            weight_decay: 0.01,
            seed: 42,
            selection_metric: SelectionMetric::WeightedF1,
            select: Select::Best,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.train_batch < 1 || self.eval_batch < 1 {
            return bad("batch sizes must be at least 1");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return bad("clip_norm must be non-negative");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            ..AdamWHyper::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub validation: MetricsReport,
    pub lr_at_epoch_end: f64,
    pub best: bool,
}

/// Per-epoch history of a run. Every value is a pure function of
/// (seed, configs, data); wall-clock timings are kept outside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl RunLog {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let epochs: Vec<EpochRecord> = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<serde_json::Result<_>>()?;
        let best_epoch = epochs
            .iter()
            .find(|r| r.best)
            .map(|r| r.epoch)
            .ok_or_else(|| EngineError::Malformed("run log has no best epoch".into()))?;
        Ok(Self { epochs, best_epoch })
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

pub struct TrainOutcome {
    /// Best or last epoch's parameters, per [`TrainConfig::select`].
    pub params: Parameters,
    pub log: RunLog,
    /// Seconds per epoch.
    pub wall_times: Vec<f64>,
    pub optim: OptimState,
}

fn check_labels(data: &[LabeledExample], classes: usize) -> Result<()> {
    match data.iter().find(|e| e.label >= classes) {
        Some(e) => Err(EngineError::LabelOutOfRange {
            label: e.label,
            classes,
        }),
        None => Ok(()),
    }
}

pub fn encode_all(vocab: &Vocabulary, data: &[LabeledExample], max_len: usize) -> Vec<EncodedExample> {
    data.iter()
        .map(|ex| {
            let mut e = tokenizer::encode(vocab, &ex.text, max_len);
            e.label = Some(ex.label);
            e
        })
        .collect()
}

fn batch_of(encoded: &[EncodedExample], idx: &[usize]) -> Result<Batch> {
    let refs: Vec<&EncodedExample> = idx.iter().map(|&i| &encoded[i]).collect();
    Ok(Batch::from_encoded(&refs)?)
}

/// Gradient per parameter tensor after one train-mode forward/backward.
fn loss_and_grads(
    params: &Parameters,
    config: &ModelConfig,
    batch: &Batch,
    labels: &[usize],
    dropout_rng: &mut rng::Rng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = model::bind(&mut tape, params);
    let logits = model::forward_on_tape(&mut tape, &vars, config, batch, true, dropout_rng)?;
    let loss = match config.head_mode {
        HeadMode::ScalarSigmoid => tape.bce_with_logits(logits, labels),
        HeadMode::Softmax => tape.cross_entropy(logits, labels),
    }
    .map_err(ModelError::from)?;
    let value = tape.value(loss).item();
    tape.backward(loss).map_err(ModelError::from)?;
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Fine-tunes a freshly initialized model.
pub fn train(
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    train_data: &[LabeledExample],
    valid_data: &[LabeledExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if train_data.is_empty() {
        return Err(EngineError::EmptyData("train"));
    }
    if valid_data.is_empty() {
        return Err(EngineError::EmptyData("validation"));
    }
    if model_config.max_len < config.max_len {
        return Err(EngineError::Config(format!(
            "max_len {} exceeds the model's positional capacity {}",
            config.max_len, model_config.max_len
        )));
    }
    if model_config.vocab_size < vocab.size() {
        return Err(EngineError::Config(format!(
            "model vocab_size {} is smaller than the vocabulary ({})",
            model_config.vocab_size,
            vocab.size()
        )));
    }
    check_labels(train_data, model_config.num_classes)?;
    check_labels(valid_data, model_config.num_classes)?;

    let train_enc = encode_all(vocab, train_data, config.max_len);
    let valid_enc = encode_all(vocab, valid_data, config.max_len);

    let mut params = model::init(model_config, config.seed)?;
    let specs = model_config.param_specs();
    let trainable: Vec<bool> = specs.iter().map(|s| !(config.freeze_encoder && s.is_encoder())).collect();
    let decay: Vec<bool> = specs
        .iter()
        .zip(&trainable)
        .map(|(s, &t)| t && s.kind.decays())
        .collect();

    let batches_per_epoch = train_enc.len().div_ceil(config.train_batch) as u64;
    let total_steps = batches_per_epoch * config.epochs as u64;
    let schedule = Schedule::with_warmup_fraction(total_steps, config.warmup_fraction);
    let clip = (config.clip_norm > 0.0).then_some(config.clip_norm);
    let mut optim = OptimState::new(params.tensors(), config.hyper(), schedule, clip);

    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut wall_times = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Parameters)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order = data::epoch_batch_indices(train_enc.len(), config.train_batch, true, config.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for idx in &order {
            let batch = batch_of(&train_enc, idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_data[i].label).collect();
            let mut dropout_rng = rng::keyed(config.seed, Stream::Dropout, optim.step);
            let (loss, mut grads) = loss_and_grads(&params, model_config, &batch, &labels, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(EngineError::NonFiniteLoss { step: optim.step });
            }
            for (g, &t) in grads.iter_mut().zip(&trainable) {
                if !t {
                    g.fill(0.0);
                }
            }
            last_lr = optim.step(params.tensors_mut(), &mut grads, &decay)?;
            loss_sum += loss * idx.len() as f64;
        }
        let report = evaluate_encoded(&params, model_config, &valid_enc, config.eval_batch, Some(vocab_labels(model_config)))?;
        let score = config.selection_metric.of(&report);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            mean_train_loss: loss_sum / train_enc.len() as f64,
            validation: report,
            lr_at_epoch_end: last_lr,
            best: false,
        });
        wall_times.push(started.elapsed().as_secs_f64());
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    records[best_epoch - 1].best = true;
    let params = match config.select {
        Select::Best => best_params,
        Select::Last => params,
    };
    Ok(TrainOutcome {
        params,
        log: RunLog {
            epochs: records,
            best_epoch,
        },
        wall_times,
        optim,
    })
}

/// Class names for reports when the task is unknown: `"0"`, `"1"`, ...
fn vocab_labels(config: &ModelConfig) -> Vec<String> {
    (0..config.num_classes).map(|i| i.to_string()).collect()
}

/// Eval-mode predicted class and class probabilities per example.
pub fn predict_encoded(
    params: &Parameters,
    config: &ModelConfig,
    encoded: &[EncodedExample],
    eval_batch: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::with_capacity(encoded.len());
    for idx in data::batch_indices(encoded.len(), eval_batch.max(1), false, 0) {
        let batch = batch_of(encoded, &idx)?;
        let logits = model::forward(params, config, &batch, false, 0)?;
        let preds = model::decide(config, &logits);
        let probs = model::probabilities(config, &logits);
        out.extend(preds.into_iter().zip(probs));
    }
    Ok(out)
}

fn evaluate_encoded(
    params: &Parameters,
    config: &ModelConfig,
    encoded: &[EncodedExample],
    eval_batch: usize,
    labels: Option<Vec<String>>,
) -> Result<MetricsReport> {
    if encoded.is_empty() {
        return Err(EngineError::EmptyData("evaluation"));
    }
    let preds: Vec<usize> = predict_encoded(params, config, encoded, eval_batch)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let truth: Vec<usize> = encoded.iter().map(|e| e.label.unwrap_or(0)).collect();
    let matrix = metrics::confusion(&preds, &truth, config.num_classes)?;
    let labels = labels.unwrap_or_else(|| vocab_labels(config));
    Ok(metrics::compute_with_labels(&matrix, &labels)?)
}

/// Metrics of eval-mode predictions over `data`.
pub fn evaluate(
    params: &Parameters,
    config: &ModelConfig,
    vocab: &Vocabulary,
    data: &[LabeledExample],
    max_len: usize,
    eval_batch: usize,
) -> Result<MetricsReport> {
    check_labels(data, config.num_classes)?;
    evaluate_encoded(params, config, &encode_all(vocab, data, max_len), eval_batch, None)
}

/// Everything needed to reproduce inference: configs, vocabulary, weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSchema,
    pub vocab: Vocabulary,
    pub params: Parameters,
    pub optim: Option<OptimSnapshot>,
}

/// Optimizer moments as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl From<&OptimState> for OptimSnapshot {
    fn from(s: &OptimState) -> Self {
        Self {
            step: s.step,
            m: s.m.clone(),
            v: s.v.clone(),
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    task: TaskSchema,
    vocab: serde_json::Value,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Binary layout (little-endian throughout):
///
/// ```text
/// "DSC1" | u32 version | u64 header_len | header JSON (configs, task, vocabulary)
/// u32 tensor_count | tensor_count × record
/// u8 has_optim | [u64 step | u32 count | count × record (m.*, then v.*)]
/// record = u32 name_len | name | u32 rank | rank × u64 dim | numel × f32
/// ```
pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        task: ckpt.task,
        vocab: serde_json::from_str(&ckpt.vocab.to_json()?)?,
    };
    let header = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for (name, t) in ckpt.params.iter() {
        write_tensor(&mut w, name, t.shape(), t.data())?;
    }
    match &ckpt.optim {
        None => w.write_all(&[0u8])?,
        Some(o) => {
            w.write_all(&[1u8])?;
            w.write_all(&o.step.to_le_bytes())?;
            w.write_all(&(2 * ckpt.params.len() as u32).to_le_bytes())?;
            for (prefix, moments) in [("m", &o.m), ("v", &o.v)] {
                for ((name, t), values) in ckpt.params.iter().zip(moments) {
                    write_tensor(&mut w, &format!("{prefix}.{name}"), t.shape(), values)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), ckpt)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn read_tensor(c: &mut Cursor<'_>, expected: Option<(&str, &[usize])>) -> Result<(String, Tensor)> {
    let hint = expected.map_or("<unknown>", |(n, _)| n).to_string();
    let name_len = c.u32().ok_or_else(|| EngineError::TruncatedTensor(hint.clone()))? as usize;
    let name = c.take(name_len).ok_or_else(|| EngineError::TruncatedTensor(hint.clone()))?;
    let name = String::from_utf8(name.to_vec()).map_err(|_| EngineError::Malformed("tensor name is not UTF-8".into()))?;
    let truncated = || EngineError::TruncatedTensor(name.clone());
    let rank = c.u32().ok_or_else(truncated)? as usize;
    if rank > 8 {
        return Err(EngineError::Malformed(format!("tensor '{name}' has rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| c.u64().map(|d| d as usize).ok_or_else(truncated))
        .collect::<Result<Vec<usize>>>()?;
    if let Some((want_name, want_shape)) = expected {
        if name != want_name {
            return Err(EngineError::Malformed(format!("expected tensor '{want_name}', found '{name}'")));
        }
        if shape != want_shape {
            return Err(EngineError::ShapeMismatch {
                name,
                expected: want_shape.to_vec(),
                found: shape,
            });
        }
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| EngineError::Malformed(format!("tensor '{name}' is too large")))?;
    let raw = c.take(numel.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let tensor = Tensor::new(shape, values).map_err(ModelError::from)?;
    Ok((name, tensor))
}

/// Parses a checkpoint, validating each tensor against `expect` (or the
/// embedded model config when `None`).
pub fn read_checkpoint(bytes: &[u8], expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4) != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(EngineError::BadMagic);
    }
    let version = c.u32().ok_or(EngineError::TruncatedHeader)?;
    if version != CHECKPOINT_VERSION {
        return Err(EngineError::UnsupportedVersion(version));
    }
    let header_len = c.u64().ok_or(EngineError::TruncatedHeader)? as usize;
    let header = c.take(header_len).ok_or(EngineError::TruncatedHeader)?;
    let header: Header = serde_json::from_slice(header)?;
    let vocab = Vocabulary::from_json(&header.vocab.to_string())?;
    let config = expect.unwrap_or(&header.model);

    let count = c.u32().ok_or(EngineError::TruncatedHeader)? as usize;
    let specs = config.param_specs();
    if count != specs.len() {
        return Err(EngineError::Malformed(format!(
            "checkpoint holds {count} tensors, config expects {}",
            specs.len()
        )));
    }
    let mut named = HashMap::with_capacity(count);
    for spec in &specs {
        let (name, t) = read_tensor(&mut c, Some((&spec.name, &spec.shape)))?;
        named.insert(name, t);
    }
    let params = Parameters::from_named(config, named)?;

    let optim = match c.u8() {
        None => return Err(EngineError::Malformed("missing optimizer flag".into())),
        Some(0) => None,
        Some(1) => {
            let step = c.u64().ok_or_else(|| EngineError::Malformed("truncated optimizer state".into()))?;
            let n = c.u32().ok_or_else(|| EngineError::Malformed("truncated optimizer state".into()))? as usize;
            if n != 2 * specs.len() {
                return Err(EngineError::Malformed("optimizer state does not match parameters".into()));
            }
            let mut moments = Vec::with_capacity(n);
            for prefix in ["m", "v"] {
                for spec in &specs {
                    let name = format!("{prefix}.{}", spec.name);
                    let (_, t) = read_tensor(&mut c, Some((&name, &spec.shape)))?;
                    moments.push(t.into_data());
                }
            }
            let v = moments.split_off(specs.len());
            Some(OptimSnapshot { step, m: moments, v })
        }
        Some(f) => return Err(EngineError::Malformed(format!("optimizer flag {f}"))),
    };
    if c.pos != bytes.len() {
        return Err(EngineError::Malformed("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        model: config.clone(),
        train: header.train,
        task: header.task,
        vocab,
        params,
        optim,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes, None)
}

/// Loads a checkpoint for a run that expects `config`; a tensor whose stored
/// shape differs is reported by name.
pub fn load_checkpoint_expecting(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes, Some(config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub confidence: f64,
}

impl Checkpoint {
    /// Label name and max class probability per text.
    pub fn predict<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Prediction>> {
        let encoded: Vec<EncodedExample> = texts
            .iter()
            .map(|t| tokenizer::encode(&self.vocab, t.as_ref(), self.train.max_len))
            .collect();
        Ok(predict_encoded(&self.params, &self.model, &encoded, self.train.eval_batch)?
            .into_iter()
            .map(|(class, probs)| Prediction {
                label: self.task.label_name(class).to_string(),
                confidence: probs.iter().copied().fold(0.0, f64::max),
            })
            .collect())
    }

    pub fn evaluate(&self, data: &[LabeledExample]) -> Result<MetricsReport> {
        check_labels(data, self.model.num_classes)?;
        let encoded = encode_all(&self.vocab, data, self.train.max_len);
        let labels = self.task.classes().iter().map(|s| s.to_string()).collect();
        evaluate_encoded(&self.params, &self.model, &encoded, self.train.eval_batch, Some(labels))
    }
}

/// Labels the validation reports of a run log with the task's class names.
pub fn label_reports(log: &mut RunLog, task: TaskSchema) {
    for r in &mut log.epochs {
        for (m, name) in r.validation.per_class.iter_mut().zip(task.classes()) {
            m.label = name.to_string();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_vocab;

    fn setup() -> (Vocabulary, ModelConfig, Vec<LabeledExample>) {
        let data = data::synth_corpus(TaskSchema::SubtaskB, 24, 3, 1.0).unwrap();
        let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
        let vocab = train_vocab(&texts, 300).unwrap();
        let mut cfg = ModelConfig::desk(vocab.size(), 2);
        cfg.hidden = 16;
        cfg.heads = 2;
        cfg.ffn = 32;
        cfg.layers = 1;
        cfg.max_len = 32;
        (vocab, cfg, data)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            train_batch: 8,
            max_len: 32,
            base_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { train_batch: 0, ..TrainConfig::default() },
            TrainConfig { max_len: 1, ..TrainConfig::default() },
            TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn train_rejects_empty_and_bad_labels() {
        let (vocab, cfg, data) = setup();
        assert!(matches!(train(&vocab, &cfg, &[], &data, &quick()), Err(EngineError::EmptyData("train"))));
        assert!(matches!(train(&vocab, &cfg, &data, &[], &quick()), Err(EngineError::EmptyData(_))));
        let bad = vec![LabeledExample::new("x", 2)];
        assert!(matches!(
            train(&vocab, &cfg, &bad, &data, &quick()),
            Err(EngineError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn run_log_jsonl_round_trip() {
        let (vocab, cfg, data) = setup();
        let out = train(&vocab, &cfg, &data, &data, &quick()).unwrap();
        assert_eq!(out.log.epochs.len(), 2);
        let back = RunLog::from_jsonl(&out.log.to_jsonl()).unwrap();
        assert_eq!(back, out.log);
        assert_eq!(out.log.to_jsonl().lines().count(), 2);
    }

    #[test]
    fn frozen_encoder_only_moves_head() {
        let (vocab, cfg, data) = setup();
        let tc = TrainConfig {
            freeze_encoder: true,
            select: Select::Last,
            ..quick()
        };
        let out = train(&vocab, &cfg, &data, &data, &tc).unwrap();
        let init = model::init(&cfg, tc.seed).unwrap();
        assert_eq!(out.params.get("token_embedding"), init.get("token_embedding"));
        assert_ne!(out.params.get("classifier.weight"), init.get("classifier.weight"));
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let (vocab, cfg, _) = setup();
        let ckpt = Checkpoint {
            params: model::init(&cfg, 0).unwrap(),
            model: cfg.clone(),
            train: quick(),
            task: TaskSchema::SubtaskB,
            vocab,
            optim: None,
        };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let back = read_checkpoint(&bytes, None).unwrap();
        assert_eq!(back.model, ckpt.model);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad, None), Err(EngineError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&bad, None), Err(EngineError::UnsupportedVersion(9))));
        assert!(matches!(read_checkpoint(&bytes[..10], None), Err(EngineError::TruncatedHeader)));
        let cut = &bytes[..bytes.len() - 50];
        assert_eq!(
            read_checkpoint(cut, None).unwrap_err().to_string(),
            "truncated tensor record 'classifier.weight'"
        );
        let mut other = cfg.clone();
        other.hidden = 8;
        other.heads = 2;
        let err = read_checkpoint(&bytes, Some(&other)).unwrap_err();
        assert!(matches!(&err, EngineError::ShapeMismatch { name, .. } if name == "token_embedding"), "{err}");
    }
}
