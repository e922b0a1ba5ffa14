//! Labeled text data: task schemas, RFC-4180 CSV I/O, seeded batching and
//! splitting, and a synthetic Devanagari corpus generator.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("unknown label '{label}' at row {row}")]
    UnknownLabel { label: String, row: usize },
    #[error("malformed UTF-8 at byte offset {0}")]
    Utf8(usize),
    #[error("unknown task '{0}' (expected subtask-b or subtask-c)")]
    UnknownTask(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Label inventory of a task. Class ids are positions in [`TaskSchema::classes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSchema {
    /// Hate speech detection: `non-hate` = 0, `hate` = 1.
    SubtaskB,
    /// Target identification: `individual` = 0, `organization` = 1, `community` = 2.
    SubtaskC,
}

impl TaskSchema {
    pub fn classes(self) -> &'static [&'static str] {
        match self {
            TaskSchema::SubtaskB => &["non-hate", "hate"],
            TaskSchema::SubtaskC => &["individual", "organization", "community"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.classes().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskSchema::SubtaskB => "subtask-b",
            TaskSchema::SubtaskC => "subtask-c",
        }
    }

    pub fn label_name(self, id: usize) -> &'static str {
        self.classes()[id]
    }

    /// Accepts a class name (case-sensitive) or an in-range integer id.
    pub fn parse_label(self, raw: &str) -> Option<usize> {
        if let Some(i) = self.classes().iter().position(|c| *c == raw) {
            return Some(i);
        }
        raw.trim().parse::<usize>().ok().filter(|&i| i < self.num_classes())
    }
}

impl fmt::Display for TaskSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskSchema {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subtask-b" | "subtask_b" | "b" => Ok(TaskSchema::SubtaskB),
            "subtask-c" | "subtask_c" | "c" => Ok(TaskSchema::SubtaskC),
            other => Err(DataError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label,
        }
    }
}

fn read_utf8(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if let Err(e) = std::str::from_utf8(&bytes) {
        return Err(DataError::Utf8(e.valid_up_to()));
    }
    Ok(bytes)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

/// Reads a headed CSV. Rows keep file order; `row` in errors counts data rows
/// from 1.
pub fn load_csv(path: &Path, text_column: &str, label_column: &str, schema: TaskSchema) -> Result<Vec<LabeledExample>> {
    let bytes = read_utf8(path)?;
    parse_csv(&bytes, text_column, label_column, schema)
}

pub fn parse_csv(bytes: &[u8], text_column: &str, label_column: &str, schema: TaskSchema) -> Result<Vec<LabeledExample>> {
    if let Err(e) = std::str::from_utf8(bytes) {
        return Err(DataError::Utf8(e.valid_up_to()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers()?.clone();
    let ti = column(&headers, text_column)?;
    let li = column(&headers, label_column)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let raw = record.get(li).unwrap_or_default();
        let label = schema.parse_label(raw).ok_or_else(|| DataError::UnknownLabel {
            label: raw.to_string(),
            row,
        })?;
        out.push(LabeledExample::new(record.get(ti).unwrap_or_default(), label));
    }
    Ok(out)
}

/// Reads one text column, ignoring any others.
pub fn load_texts(path: &Path, text_column: &str) -> Result<Vec<String>> {
    let bytes = read_utf8(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let headers = reader.headers()?.clone();
    let ti = column(&headers, text_column)?;
    reader
        .records()
        .map(|r| Ok(r?.get(ti).unwrap_or_default().to_string()))
        .collect()
}

/// Writes `text,label` with labels as class names.
pub fn write_csv<W: Write>(writer: W, data: &[LabeledExample], schema: TaskSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["text", "label"])?;
    for ex in data {
        w.write_record([ex.text.as_str(), schema.label_name(ex.label)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: &Path, data: &[LabeledExample], schema: TaskSchema) -> Result<()> {
    write_csv(std::fs::File::create(path)?, data, schema)
}

/// One prediction row: `index,predicted_label,confidence`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub index: usize,
    pub label: String,
    pub confidence: f64,
}

pub fn write_predictions<W: Write>(writer: W, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "predicted_label", "confidence"])?;
    for r in rows {
        w.write_record([r.index.to_string(), r.label.clone(), format!("{:.6}", r.confidence)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record?;
        let field = |i: usize| r.get(i).unwrap_or_default();
        out.push(PredictionRow {
            index: field(0).parse().map_err(|_| DataError::Invalid(format!("bad index '{}'", field(0))))?,
            label: field(1).to_string(),
            confidence: field(2)
                .parse()
                .map_err(|_| DataError::Invalid(format!("bad confidence '{}'", field(2))))?,
        });
    }
    Ok(out)
}

fn fisher_yates<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}

/// Index batches over `n` items. With `shuffle`, a seeded Fisher–Yates
/// permutation is chunked; the final short batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    epoch_batch_indices(n, batch_size, shuffle, seed, 0)
}

/// [`batch_indices`] for a given epoch: each epoch draws its own permutation.
pub fn epoch_batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        fisher_yates(&mut order, &mut rng::keyed(seed, Stream::Shuffle, epoch));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batches(data: &[LabeledExample], batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<LabeledExample>> {
    batch_indices(data.len(), batch_size, shuffle, seed)
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| data[i].clone()).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSize {
    Count(usize),
    Fraction(f64),
}

/// Train/valid/test partition of a single labeled file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: SplitSize,
    pub valid: SplitSize,
    pub test: SplitSize,
    pub seed: u64,
}

impl SplitSpec {
    /// Proportions of the Subtask B release (19,019 / 4,076 / 4,076).
    pub fn shared_task_b(seed: u64) -> Self {
        let total = (19_019 + 4_076 + 4_076) as f64;
        Self {
            train: SplitSize::Fraction(19_019.0 / total),
            valid: SplitSize::Fraction(4_076.0 / total),
            test: SplitSize::Fraction(4_076.0 / total),
            seed,
        }
    }

    fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let sizes = [self.train, self.valid, self.test];
        let counts: [usize; 3] = if sizes.iter().all(|s| matches!(s, SplitSize::Count(_))) {
            sizes.map(|s| match s {
                SplitSize::Count(c) => c,
                SplitSize::Fraction(_) => unreachable!(),
            })
        } else {
            let frac = |s: SplitSize| match s {
                SplitSize::Fraction(f) => Ok(f),
                SplitSize::Count(_) => Err(DataError::Invalid("split sizes must be all counts or all fractions".into())),
            };
            let (a, b, c) = (frac(self.train)?, frac(self.valid)?, frac(self.test)?);
            if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
                return Err(DataError::Invalid("split fractions must be non-negative and sum to 1".into()));
            }
            let tr = (a * n as f64).round() as usize;
            let va = ((b * n as f64).round() as usize).min(n - tr.min(n));
            [tr.min(n), va, n - tr.min(n) - va]
        };
        if counts.iter().sum::<usize>() != n {
            return Err(DataError::Invalid(format!("split counts {counts:?} do not sum to {n}")));
        }
        for (count, size) in counts.iter().zip(sizes) {
            let requested = match size {
                SplitSize::Count(c) => c > 0,
                SplitSize::Fraction(f) => f > 0.0,
            };
            if requested && *count == 0 {
                return Err(DataError::Invalid("a requested split is empty".into()));
            }
        }
        Ok(counts)
    }
}

/// Seeded shuffle, then consecutive train/valid/test slices.
pub fn split(
    data: &[LabeledExample],
    spec: &SplitSpec,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>, Vec<LabeledExample>)> {
    let [tr, va, _] = spec.counts(data.len())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    fisher_yates(&mut order, &mut rng::stream(spec.seed, Stream::Split));
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..tr]), pick(&order[tr..tr + va]), pick(&order[tr + va..])))
}

const FILLER: &[&str] = &[
    "यह", "है", "और", "में", "के", "की", "लोग", "आज", "बहुत", "क्या", "नहीं", "हम", "वह", "पर", "से", "था", "एक", "सब",
    "कुछ", "अब",
];

fn markers(schema: TaskSchema, class: usize) -> &'static [&'static str] {
    match (schema, class) {
        (TaskSchema::SubtaskB, 0) => &["शांति", "मित्रता", "सम्मान", "सहयोग"],
        (TaskSchema::SubtaskB, _) => &["घृणा", "नफ़रत", "दुश्मन", "अपमान"],
        (TaskSchema::SubtaskC, 0) => &["व्यक्ति", "नेता", "अभिनेता", "उसको"],
        (TaskSchema::SubtaskC, 1) => &["संगठन", "कंपनी", "पार्टी", "संस्था"],
        (TaskSchema::SubtaskC, _) => &["समुदाय", "समाज", "जाति", "धर्म"],
    }
}

/// Every class-exclusive marker word of `schema`, by class.
pub fn marker_words(schema: TaskSchema) -> Vec<&'static [&'static str]> {
    (0..schema.num_classes()).map(|c| markers(schema, c)).collect()
}

/// Class-conditioned Devanagari strings of 6–12 words. A fraction
/// `separability` of each example's words (rounded) are markers exclusive to
/// its class; the rest are shared filler. Class counts differ by at most one.
pub fn synth_corpus(schema: TaskSchema, n: usize, seed: u64, separability: f64) -> Result<Vec<LabeledExample>> {
    let classes = schema.num_classes();
    if n < classes {
        return Err(DataError::Invalid(format!("need at least {classes} examples, got {n}")));
    }
    if !(0.0..=1.0).contains(&separability) {
        return Err(DataError::Invalid(format!("separability {separability} outside [0, 1]")));
    }
    let mut rng = rng::stream(seed, Stream::Synth);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    fisher_yates(&mut labels, &mut rng);
    let pick = |rng: &mut Rng, words: &[&'static str]| words[rng.gen_range(0..words.len() as u32) as usize];
    Ok(labels
        .into_iter()
        .map(|label| {
            let len = rng.gen_range(6u32..=12) as usize;
            let marked = (separability * len as f64).round() as usize;
            let mut slots: Vec<bool> = (0..len).map(|i| i < marked).collect();
            fisher_yates(&mut slots, &mut rng);
            let words: Vec<&str> = slots
                .iter()
                .map(|&is_marker| {
                    if is_marker {
                        pick(&mut rng, markers(schema, label))
                    } else {
                        pick(&mut rng, FILLER)
                    }
                })
                .collect();
            LabeledExample::new(words.join(" "), label)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_parsing_follows_schema_order() {
        let b = TaskSchema::SubtaskB;
        assert_eq!(b.parse_label("hate"), Some(1));
        assert_eq!(b.parse_label("non-hate"), Some(0));
        assert_eq!(b.parse_label("1"), Some(1));
        assert_eq!(b.parse_label("2"), None);
        assert_eq!(b.parse_label("Hate"), None);
        assert_eq!(TaskSchema::SubtaskC.parse_label("community"), Some(2));
        assert_eq!("subtask-c".parse::<TaskSchema>().unwrap(), TaskSchema::SubtaskC);
        assert!("subtask-d".parse::<TaskSchema>().is_err());
    }

    #[test]
    fn parse_reports_row_of_unknown_label() {
        let csv = "text,label\nनमस्ते,individual\nabc,Org\n";
        let err = parse_csv(csv.as_bytes(), "text", "label", TaskSchema::SubtaskC).unwrap_err();
        assert_eq!(err.to_string(), "unknown label 'Org' at row 2");
    }

    #[test]
    fn parse_reports_missing_column_and_bad_utf8() {
        let err = parse_csv(b"body,label\nx,hate\n", "text", "label", TaskSchema::SubtaskB).unwrap_err();
        assert_eq!(err.to_string(), "missing column 'text'");
        let mut bytes = b"text,label\nab".to_vec();
        bytes.push(0xFF);
        bytes.extend_from_slice(b",hate\n");
        let err = parse_csv(&bytes, "text", "label", TaskSchema::SubtaskB).unwrap_err();
        assert!(matches!(err, DataError::Utf8(13)), "{err}");
    }

    #[test]
    fn batch_counts() {
        let b = batch_indices(19_019, 16, true, 1);
        assert_eq!(b.len(), 1_189);
        // 19,019 = 16 × 1,188 + 11
        assert_eq!(b.last().unwrap().len(), 11);
        let b = batch_indices(10, 64, false, 0);
        assert_eq!(b, vec![(0..10).collect::<Vec<_>>()]);
    }

    #[test]
    fn shuffle_depends_only_on_seed() {
        assert_eq!(batch_indices(50, 7, true, 3), batch_indices(50, 7, true, 3));
        assert_ne!(batch_indices(50, 7, true, 3), batch_indices(50, 7, true, 4));
    }

    #[test]
    fn synth_balance_and_errors() {
        let data = synth_corpus(TaskSchema::SubtaskC, 475, 1, 0.5).unwrap();
        let mut counts = [0; 3];
        for ex in &data {
            counts[ex.label] += 1;
        }
        assert_eq!(counts, [159, 158, 158]);
        assert!(synth_corpus(TaskSchema::SubtaskC, 2, 1, 0.5).is_err());
        assert!(synth_corpus(TaskSchema::SubtaskB, 4, 1, 1.5).is_err());
    }

    #[test]
    fn synth_poles() {
        let sep = synth_corpus(TaskSchema::SubtaskB, 32, 7, 1.0).unwrap();
        for ex in &sep {
            for w in ex.text.split(' ') {
                assert!(markers(TaskSchema::SubtaskB, ex.label).contains(&w));
            }
        }
        let noise = synth_corpus(TaskSchema::SubtaskB, 32, 7, 0.0).unwrap();
        assert!(noise.iter().all(|ex| ex.text.split(' ').all(|w| FILLER.contains(&w))));
    }

    #[test]
    fn split_counts_sum() {
        let data = synth_corpus(TaskSchema::SubtaskB, 100, 0, 0.5).unwrap();
        let spec = SplitSpec {
            train: SplitSize::Count(70),
            valid: SplitSize::Count(20),
            test: SplitSize::Count(10),
            seed: 5,
        };
        let (a, b, c) = split(&data, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 20, 10));
        let (a, b, c) = split(&data, &SplitSpec::shared_task_b(5)).unwrap();
        assert_eq!(a.len() + b.len() + c.len(), 100);
        assert_eq!((a.len(), b.len(), c.len()), (70, 15, 15));
        let bad = SplitSpec {
            train: SplitSize::Count(70),
            ..spec
        };
        assert!(split(&data[..50], &bad).is_err());
    }
}
