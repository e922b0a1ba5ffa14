//! One-factor-at-a-time ablations: a baseline run plus variants that each
//! override a single configuration field, reported as a metric × run table.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::data::LabeledExample;
use crate::engine::{self, EngineError, RunLog, TrainConfig};
use crate::metrics::ABLATION_ROWS;
use crate::model::ModelConfig;
use crate::tokenizer::Vocabulary;

pub const BASELINE_COLUMN: &str = "Original";

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("variant '{name}' changes {count} fields; exactly one is allowed")]
    NotOneFactor { name: String, count: usize },
    #[error("variant '{name}': unknown field '{field}'")]
    UnknownField { name: String, field: String },
    #[error("variant '{name}': {message}")]
    InvalidVariant { name: String, message: String },
    #[error("duplicate column name '{0}'")]
    DuplicateColumn(String),
    #[error("invalid baseline: {0}")]
    Baseline(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AblationError>;

/// A named column that overrides configuration fields of the baseline.
///
/// Keys are either `train.<field>`, `model.<field>`, or a bare field name,
/// which resolves to the training config first and the model config second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: BTreeMap<String, Value>,
}

impl Variant {
    pub fn new(name: impl Into<String>, field: &str, value: impl Into<Value>) -> Self {
        Self {
            name: name.into(),
            overrides: BTreeMap::from([(field.to_string(), value.into())]),
        }
    }
}

/// The configuration a single run resolves to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub baseline: RunConfig,
    pub variants: Vec<Variant>,
}

impl AblationSpec {
    /// Baseline plus the sequence-length, learning-rate and batch-size variants.
    pub fn with_defaults(baseline: RunConfig) -> Self {
        Self {
            baseline,
            variants: default_variants(),
        }
    }

    /// Column names in table order, baseline first.
    pub fn column_names(&self) -> Vec<String> {
        std::iter::once(BASELINE_COLUMN.to_string())
            .chain(self.variants.iter().map(|v| v.name.clone()))
            .collect()
    }

    /// Baseline then each variant, with overrides applied and the
    /// one-factor rule checked.
    pub fn resolve(&self) -> Result<Vec<(String, RunConfig)>> {
        check_run(&self.baseline).map_err(AblationError::Baseline)?;
        let mut seen = HashSet::from([BASELINE_COLUMN.to_string()]);
        let mut out = vec![(BASELINE_COLUMN.to_string(), self.baseline.clone())];
        for v in &self.variants {
            if !seen.insert(v.name.clone()) {
                return Err(AblationError::DuplicateColumn(v.name.clone()));
            }
            let resolved = apply(&self.baseline, v)?;
            let count = diff_fields(&self.baseline, &resolved).len();
            if count != 1 {
                return Err(AblationError::NotOneFactor {
                    name: v.name.clone(),
                    count,
                });
            }
            check_run(&resolved).map_err(|message| AblationError::InvalidVariant {
                name: v.name.clone(),
                message,
            })?;
            out.push((v.name.clone(), resolved));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }
}

pub fn default_variants() -> Vec<Variant> {
    vec![
        Variant::new("Sequence Length (128)", "train.max_len", 128),
        Variant::new("Learning Rate (1e-5)", "train.base_lr", 1e-5),
        Variant::new("Batch Size (8)", "train.train_batch", 8),
    ]
}

fn check_run(run: &RunConfig) -> std::result::Result<(), String> {
    run.model.validate().map_err(|e| e.to_string())?;
    run.train.validate().map_err(|e| e.to_string())?;
    if run.train.max_len > run.model.max_len {
        return Err(format!(
            "max_len {} exceeds the model's positional capacity {}",
            run.train.max_len, run.model.max_len
        ));
    }
    Ok(())
}

fn apply(baseline: &RunConfig, variant: &Variant) -> Result<RunConfig> {
    let mut json = serde_json::to_value(baseline)?;
    let root = json.as_object_mut().expect("run config is an object");
    for (key, value) in &variant.overrides {
        let unknown = || AblationError::UnknownField {
            name: variant.name.clone(),
            field: key.clone(),
        };
        let (section, field) = match key.split_once('.') {
            Some((s @ ("train" | "model"), f)) => (s, f),
            Some(_) => return Err(unknown()),
            None if root["train"].get(key).is_some() => ("train", key.as_str()),
            None => ("model", key.as_str()),
        };
        let slot = root
            .get_mut(section)
            .and_then(Value::as_object_mut)
            .and_then(|o| o.get_mut(field))
            .ok_or_else(unknown)?;
        *slot = value.clone();
    }
    serde_json::from_value(json).map_err(|e| AblationError::InvalidVariant {
        name: variant.name.clone(),
        message: e.to_string(),
    })
}

fn leaves(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&path, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted paths (e.g. `train.max_len`) whose values differ between two runs.
pub fn diff_fields(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (mut la, mut lb) = (BTreeMap::new(), BTreeMap::new());
    leaves("", &serde_json::to_value(a).expect("serializes"), &mut la);
    leaves("", &serde_json::to_value(b).expect("serializes"), &mut lb);
    let keys: HashSet<&String> = la.keys().chain(lb.keys()).collect();
    let mut diff: Vec<String> = keys
        .into_iter()
        .filter(|k| la.get(*k) != lb.get(*k))
        .cloned()
        .collect();
    diff.sort();
    diff
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub name: String,
    /// Values in row order; `None` when the run failed.
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<String>,
    pub columns: Vec<AblationColumn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Latex,
    Json,
}

impl AblationTable {
    pub fn cell(&self, row: usize, column: usize) -> Option<f64> {
        self.columns[column].values.as_ref().map(|v| v[row])
    }

    fn cells(&self, row: usize) -> Vec<String> {
        (0..self.columns.len())
            .map(|c| self.cell(row, c).map_or_else(|| "FAILED".to_string(), |v| format!("{v:.4}")))
            .collect()
    }

    pub fn render(&self, format: TableFormat) -> String {
        let names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        match format {
            TableFormat::Markdown => {
                let mut out = format!("| Metric | {} |\n", names.join(" | "));
                out.push_str(&format!("| --- |{}\n", " --- |".repeat(names.len())));
                for (r, row) in self.rows.iter().enumerate() {
                    out.push_str(&format!("| {row} | {} |\n", self.cells(r).join(" | ")));
                }
                out
            }
            TableFormat::Latex => {
                let bold: Vec<String> = names.iter().map(|n| format!("\\textbf{{{n}}}")).collect();
                let mut out = format!("\\begin{{tabular}}{{l{}}}\n\\hline\n", "c".repeat(names.len()));
                out.push_str(&format!("\\textbf{{Metric}} & {} \\\\ \\hline\n", bold.join(" & ")));
                for (r, row) in self.rows.iter().enumerate() {
                    out.push_str(&format!("{row} & {} \\\\ \\hline\n", self.cells(r).join(" & ")));
                }
                out.push_str("\\end{tabular}\n");
                out
            }
            TableFormat::Json => serde_json::to_string_pretty(self).expect("table serializes"),
        }
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Every present cell lies in [0, 1].
    pub fn in_unit_range(&self) -> bool {
        self.columns
            .iter()
            .filter_map(|c| c.values.as_ref())
            .flatten()
            .all(|v| (0.0..=1.0).contains(v))
    }
}

pub struct RunResult {
    pub name: String,
    pub config: RunConfig,
    pub outcome: std::result::Result<RunLog, EngineError>,
}

pub struct AblationOutcome {
    pub table: AblationTable,
    pub runs: Vec<RunResult>,
}

/// Trains every column concurrently on the same data and evaluates each
/// selected model on `valid`. A failing run yields a `FAILED` column.
pub fn run_ablation(
    spec: &AblationSpec,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    valid: &[LabeledExample],
) -> Result<AblationOutcome> {
    let resolved = spec.resolve()?;
    let outcomes: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = resolved
            .iter()
            .map(|(_, run)| {
                s.spawn(move || {
                    let out = engine::train(vocab, &run.model, train, valid, &run.train)?;
                    let report =
                        engine::evaluate(&out.params, &run.model, vocab, valid, run.train.max_len, run.train.eval_batch)?;
                    Ok::<_, EngineError>((out.log, report))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation run panicked"))
            .collect()
    });

    let mut columns = Vec::with_capacity(resolved.len());
    let mut runs = Vec::with_capacity(resolved.len());
    for ((name, config), outcome) in resolved.into_iter().zip(outcomes) {
        let (values, outcome) = match outcome {
            Ok((log, report)) => (Some(report.ablation_values().to_vec()), Ok(log)),
            Err(e) => (None, Err(e)),
        };
        columns.push(AblationColumn {
            name: name.clone(),
            values,
        });
        runs.push(RunResult { name, config, outcome });
    }
    Ok(AblationOutcome {
        table: AblationTable {
            rows: ABLATION_ROWS.iter().map(|s| s.to_string()).collect(),
            columns,
        },
        runs,
    })
}

/// File-name-safe form of a column name: `"Batch Size (8)"` → `"batch-size-8"`.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// Writes `ablation.json`, `ablation.md`, and per run `runs/<slug>.jsonl`
/// plus `runs/<slug>.config.json` (or `runs/<slug>.error.txt`).
pub fn write_outputs(dir: &Path, outcome: &AblationOutcome) -> Result<()> {
    std::fs::create_dir_all(dir.join("runs"))?;
    std::fs::write(dir.join("ablation.json"), outcome.table.render(TableFormat::Json) + "\n")?;
    std::fs::write(dir.join("ablation.md"), outcome.table.render(TableFormat::Markdown))?;
    for run in &outcome.runs {
        let base = dir.join("runs").join(slug(&run.name));
        let mut config = Map::new();
        config.insert("name".into(), Value::String(run.name.clone()));
        config.insert("config".into(), serde_json::to_value(&run.config)?);
        std::fs::write(base.with_extension("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
        match &run.outcome {
            Ok(log) => std::fs::write(base.with_extension("jsonl"), log.to_jsonl())?,
            Err(e) => std::fs::write(base.with_extension("error.txt"), format!("{e}\n"))?,
        }
    }
    Ok(())
}
