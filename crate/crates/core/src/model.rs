//! Transformer encoder with a CLS-pooled classification head.
//!
//! Layout follows the RoBERTa family: learned absolute positions, post-norm
//! residual blocks (`x = LN(x + sublayer(x))`), GELU feed-forward. The head
//! takes the hidden state at position 0 through
//! `pre_classifier (H→H) → ReLU → dropout → classifier`, producing either one
//! logit per example (sigmoid head, binary tasks) or one per class.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Tensor, Var};
use crate::rng::{self, Rng, Stream};
use crate::tokenizer::EncodedExample;

/// Dropout applied between the pre-classifier and the classifier.
pub const HEAD_DROPOUT: f64 = 0.3;
pub const ENCODER_DROPOUT: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(&'static str),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("batch is malformed: {0}")]
    Batch(String),
    #[error("parameter '{name}' has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One logit, sigmoid probability of class 1.
    ScalarSigmoid,
    /// `num_classes` logits.
    Softmax,
}

impl HeadMode {
    pub fn default_for(num_classes: usize) -> Self {
        if num_classes == 2 {
            HeadMode::ScalarSigmoid
        } else {
            HeadMode::Softmax
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Positional capacity.
    pub max_len: usize,
    /// Head dropout.
    pub dropout: f64,
    pub encoder_dropout: f64,
    pub num_classes: usize,
    pub head_mode: HeadMode,
}

impl ModelConfig {
    /// Desk-scale shape: hidden 64, 2 layers, 4 heads, ffn 128, 64 positions.
    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_len: 64,
            dropout: HEAD_DROPOUT,
            encoder_dropout: ENCODER_DROPOUT,
            num_classes,
            head_mode: HeadMode::default_for(num_classes),
        }
    }

    /// Base-size shape (768 hidden, 12 layers, 256 positions).
    pub fn base(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            hidden: 768,
            layers: 12,
            heads: 12,
            ffn: 3072,
            max_len: 256,
            ..Self::desk(vocab_size, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.max_len == 0 {
            return Err(ModelError::Config("all dimensions must be at least 1"));
        }
        if self.num_classes == 0 {
            return Err(ModelError::Config("num_classes must be at least 1"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Config("hidden not divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.encoder_dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)"));
        }
        if self.head_mode == HeadMode::ScalarSigmoid && self.num_classes != 2 {
            return Err(ModelError::Config("scalar_sigmoid head requires num_classes = 2"));
        }
        Ok(())
    }

    /// Width of the classifier output.
    pub fn out_dim(&self) -> usize {
        match self.head_mode {
            HeadMode::ScalarSigmoid => 1,
            HeadMode::Softmax => self.num_classes,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Every named tensor, in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (h, f) = (self.hidden, self.ffn);
        let mut specs = vec![
            ParamSpec::new("token_embedding", &[self.vocab_size, h], ParamKind::Weight),
            ParamSpec::new("position_embedding", &[self.max_len, h], ParamKind::Weight),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            for proj in ["q", "k", "v", "o"] {
                specs.push(ParamSpec::new(&p(&format!("attn.{proj}.weight")), &[h, h], ParamKind::Weight));
                specs.push(ParamSpec::new(&p(&format!("attn.{proj}.bias")), &[h], ParamKind::Bias));
            }
            specs.push(ParamSpec::new(&p("ln1.weight"), &[h], ParamKind::NormScale));
            specs.push(ParamSpec::new(&p("ln1.bias"), &[h], ParamKind::NormShift));
            specs.push(ParamSpec::new(&p("ffn.in.weight"), &[h, f], ParamKind::Weight));
            specs.push(ParamSpec::new(&p("ffn.in.bias"), &[f], ParamKind::Bias));
            specs.push(ParamSpec::new(&p("ffn.out.weight"), &[f, h], ParamKind::Weight));
            specs.push(ParamSpec::new(&p("ffn.out.bias"), &[h], ParamKind::Bias));
            specs.push(ParamSpec::new(&p("ln2.weight"), &[h], ParamKind::NormScale));
            specs.push(ParamSpec::new(&p("ln2.bias"), &[h], ParamKind::NormShift));
        }
        specs.push(ParamSpec::new("pre_classifier.weight", &[h, h], ParamKind::Weight));
        specs.push(ParamSpec::new("pre_classifier.bias", &[h], ParamKind::Bias));
        specs.push(ParamSpec::new("classifier.weight", &[h, self.out_dim()], ParamKind::Weight));
        specs.push(ParamSpec::new("classifier.bias", &[self.out_dim()], ParamKind::Bias));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Decoupled weight decay applies to weight matrices only.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: &str, shape: &[usize], kind: ParamKind) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind,
        }
    }

    /// Encoder tensors are everything outside the classification head.
    pub fn is_encoder(&self) -> bool {
        !(self.name.starts_with("pre_classifier.") || self.name.starts_with("classifier."))
    }
}

/// Named tensor set in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Parameters {
    /// Builds from `(name, tensor)` pairs, checking names and shapes against `config`.
    pub fn from_named(config: &ModelConfig, mut named: HashMap<String, Tensor>) -> Result<Self> {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for spec in config.param_specs() {
            let t = named
                .remove(&spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name,
                    expected: spec.shape,
                    found: t.shape().to_vec(),
                });
            }
            names.push(spec.name);
            tensors.push(t);
        }
        if let Some(extra) = named.into_keys().next() {
            return Err(ModelError::Batch(format!("unexpected parameter '{extra}'")));
        }
        Ok(Self::assemble(names, tensors))
    }

    fn assemble(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Weights ~ N(0, 0.02²) truncated at ±2σ, biases 0, layernorm scale 1.
pub fn init(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = rng::stream(seed, Stream::Init);
    let specs = config.param_specs();
    let pre = specs
        .iter()
        .find(|s| s.name == "pre_classifier.weight")
        .expect("head is always present");
    assert_eq!(
        pre.shape,
        vec![config.hidden, config.hidden],
        "pre_classifier must preserve the hidden width"
    );
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut t = Tensor::zeros(&spec.shape);
        match spec.kind {
            ParamKind::Weight => {
                for v in t.data_mut() {
                    *v = truncated_normal(&mut rng, INIT_STD);
                }
            }
            ParamKind::NormScale => t.data_mut().fill(1.0),
            ParamKind::Bias | ParamKind::NormShift => {}
        }
        names.push(spec.name);
        tensors.push(t);
    }
    Ok(Parameters::assemble(names, tensors))
}

/// A padded batch of token ids, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(ids: Vec<Vec<u32>>, mask: Vec<Vec<u8>>) -> Result<Self> {
        let batch = ids.len();
        if batch == 0 || mask.len() != batch {
            return Err(ModelError::Batch("ids and mask must be non-empty with equal rows".into()));
        }
        let seq = ids[0].len();
        if ids.iter().any(|r| r.len() != seq) || mask.iter().any(|r| r.len() != seq) {
            return Err(ModelError::Batch("ragged rows".into()));
        }
        Ok(Self {
            ids: ids.concat(),
            mask: mask.concat(),
            batch,
            seq,
        })
    }

    /// Stacks encoded examples, dropping trailing columns that are padding in
    /// every row.
    pub fn from_encoded(examples: &[&EncodedExample]) -> Result<Self> {
        let width = examples.iter().map(|e| e.len_unpadded()).max().unwrap_or(0).max(1);
        let ids = examples.iter().map(|e| e.ids[..width].to_vec()).collect();
        let mask = examples.iter().map(|e| e.mask[..width].to_vec()).collect();
        Self::new(ids, mask)
    }
}

/// Puts every parameter on `tape` as a leaf; returned in canonical order.
pub fn bind(tape: &mut Tape, params: &Parameters) -> Vec<Var> {
    params.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
}

struct Named<'a> {
    vars: &'a [Var],
    index: HashMap<String, usize>,
}

impl Named<'_> {
    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

/// Records the forward pass on `tape` using `vars` (canonical order) as the
/// parameters. Returns `[batch, out_dim]` logits.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &[Var],
    config: &ModelConfig,
    input: &Batch,
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let specs = config.param_specs();
    if vars.len() != specs.len() {
        return Err(ModelError::Batch(format!("expected {} parameter vars, got {}", specs.len(), vars.len())));
    }
    let p = Named {
        vars,
        index: specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect(),
    };
    let (b, s, h) = (input.batch, input.seq, config.hidden);
    if s > config.max_len {
        return Err(ModelError::SequenceTooLong {
            len: s,
            max_len: config.max_len,
        });
    }
    if input.ids.len() != b * s || input.mask.len() != b * s {
        return Err(ModelError::Batch("ids/mask length disagrees with batch × seq".into()));
    }
    if let Some(&id) = input.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }

    let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let tok = tape.embedding(p.get("token_embedding"), &ids)?;
    let pos = tape.embedding(p.get("position_embedding"), &positions)?;
    let mut x = tape.add(tok, pos)?;

    let heads = config.heads;
    let attn_mask: Vec<bool> = (0..b * heads)
        .flat_map(|g| {
            let row = &input.mask[(g / heads) * s..(g / heads + 1) * s];
            (0..s).flat_map(move |_| row.iter().map(|&m| m == 1))
        })
        .collect();
    let scale = 1.0 / (config.head_dim() as f64).sqrt();

    for l in 0..config.layers {
        let w = |n: &str| p.get(&format!("layers.{l}.{n}"));
        let proj = |tape: &mut Tape, x: Var, n: &str| -> Result<Var> {
            let y = tape.matmul(x, w(&format!("{n}.weight")))?;
            Ok(tape.add_bias(y, w(&format!("{n}.bias")))?)
        };
        let q = proj(tape, x, "attn.q")?;
        let k = proj(tape, x, "attn.k")?;
        let v = proj(tape, x, "attn.v")?;
        let q = tape.split_heads(q, b, s, heads)?;
        let k = tape.split_heads(k, b, s, heads)?;
        let v = tape.split_heads(v, b, s, heads)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax(scores, Some(&attn_mask))?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.merge_heads(ctx, b, s, heads)?;
        let attn = proj(tape, ctx, "attn.o")?;
        let attn = tape.dropout(attn, config.encoder_dropout, train, rng)?;
        let res = tape.add(x, attn)?;
        x = tape.layernorm(res, w("ln1.weight"), w("ln1.bias"), LAYER_NORM_EPS)?;

        let inner = proj(tape, x, "ffn.in")?;
        let inner = tape.gelu(inner);
        let out = proj(tape, inner, "ffn.out")?;
        let out = tape.dropout(out, config.encoder_dropout, train, rng)?;
        let res = tape.add(x, out)?;
        x = tape.layernorm(res, w("ln2.weight"), w("ln2.bias"), LAYER_NORM_EPS)?;
    }
    debug_assert_eq!(tape.shape(x), &[b * s, h]);

    let cls_rows: Vec<usize> = (0..b).map(|i| i * s).collect();
    let cls = tape.slice_rows(x, &cls_rows)?;
    head_on_tape(tape, &p, config, cls, train, rng)
}

fn head_on_tape(tape: &mut Tape, p: &Named<'_>, config: &ModelConfig, cls: Var, train: bool, rng: &mut Rng) -> Result<Var> {
    let pre = tape.matmul(cls, p.get("pre_classifier.weight"))?;
    let pre = tape.add_bias(pre, p.get("pre_classifier.bias"))?;
    let act = tape.relu(pre);
    let act = tape.dropout(act, config.dropout, train, rng)?;
    let out = tape.matmul(act, p.get("classifier.weight"))?;
    Ok(tape.add_bias(out, p.get("classifier.bias"))?)
}

/// Logits for `input`. Dropout draws come from `rng_seed` when `train`.
pub fn forward(params: &Parameters, config: &ModelConfig, input: &Batch, train: bool, rng_seed: u64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let mut rng = rng::stream(rng_seed, Stream::Dropout);
    let out = forward_on_tape(&mut tape, &vars, config, input, train, &mut rng)?;
    Ok(tape.value(out).clone())
}

/// Class probabilities from logits, one row per example.
pub fn probabilities(config: &ModelConfig, logits: &Tensor) -> Vec<Vec<f64>> {
    let width = logits.last_dim();
    logits
        .data()
        .chunks(width)
        .map(|row| match config.head_mode {
            HeadMode::ScalarSigmoid => {
                let p = autodiff::sigmoid(row[0]);
                vec![1.0 - p, p]
            }
            HeadMode::Softmax => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.iter().map(|e| e / total).collect()
            }
        })
        .collect()
}

/// Eval-mode class probabilities.
pub fn predict_proba(params: &Parameters, config: &ModelConfig, input: &Batch) -> Result<Vec<Vec<f64>>> {
    let logits = forward(params, config, input, false, 0)?;
    Ok(probabilities(config, &logits))
}

/// Predicted class per example: argmax for softmax (first maximum wins),
/// strict `p > 0.5` for the sigmoid head.
pub fn decide(config: &ModelConfig, logits: &Tensor) -> Vec<usize> {
    match config.head_mode {
        HeadMode::ScalarSigmoid => logits
            .data()
            .iter()
            .map(|&z| usize::from(autodiff::sigmoid(z) > 0.5))
            .collect(),
        HeadMode::Softmax => logits
            .data()
            .chunks(logits.last_dim())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect(),
    }
}

/// Applies head dropout to a frozen activation vector; used to check that
/// inverted dropout is unbiased.
pub fn head_dropout_sample(config: &ModelConfig, activation: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![activation.len()], activation.to_vec())?);
    let mut rng = rng::stream(seed, Stream::Dropout);
    let d = tape.dropout(a, config.dropout, true, &mut rng)?;
    Ok(tape.value(d).data().to_vec())
}
