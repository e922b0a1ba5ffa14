//! Desk-scale multilingual text classification.
//!
//! The crate bundles everything needed to train and evaluate a small
//! transformer classifier on Devanagari (or any UTF-8) text:
//!
//! - [`tokenizer`]: byte-level BPE vocabulary training and fixed-length encoding
//! - [`autodiff`]: a tape-based reverse-mode differentiation kernel over `f64` tensors
//! - [`model`]: transformer encoder with a CLS-pooled classification head
//! - [`optim`]: AdamW, linear warmup/decay schedule and global-norm clipping
//! - [`data`]: CSV ingestion, task label schemas, batching and synthetic corpora
//! - [`metrics`]: confusion matrices, weighted/micro/macro averaging and report rendering
//! - [`engine`]: the training/evaluation loop, checkpoints and prediction
//! - [`ablation`]: one-factor-at-a-time ablation runs and result tables
//! - [`cli`]: the `dscls` command line and HTTP endpoint

pub mod ablation;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tokenizer;

pub use autodiff::{Tape, Tensor, Var};
pub use data::{LabeledExample, TaskSchema};
pub use engine::{Checkpoint, RunLog, TrainConfig};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::{HeadMode, ModelConfig, Parameters};
pub use tokenizer::{EncodedExample, Vocabulary};
