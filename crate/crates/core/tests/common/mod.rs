//! Oracles and fixtures shared by the integration tests. The oracles are
//! written from the definitions, without calling the code they check.

#![allow(dead_code)]

use dscls::data::{synth_corpus, LabeledExample, TaskSchema};
use dscls::engine::TrainConfig;
use dscls::metrics::MetricsReport;
use dscls::model::{HeadMode, ModelConfig};
use dscls::tokenizer::{train_vocab, Vocabulary};

/// Metrics by direct counting over (prediction, label) pairs.
#[derive(Debug)]
pub struct BruteMetrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub weighted: [f64; 3],
    pub micro: [f64; 3],
    pub macro_avg: [f64; 3],
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

pub fn brute_metrics(preds: &[usize], labels: &[usize], classes: usize) -> BruteMetrics {
    let n = preds.len();
    let pairs = || preds.iter().zip(labels);
    let correct = pairs().filter(|(p, l)| p == l).count();
    let (mut precision, mut recall, mut f1, mut support) = (vec![], vec![], vec![], vec![]);
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for k in 0..classes {
        let tp = pairs().filter(|&(&p, &l)| p == k && l == k).count();
        let fp = pairs().filter(|&(&p, &l)| p == k && l != k).count();
        let fneg = pairs().filter(|&(&p, &l)| p != k && l == k).count();
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
        let p = safe_div(tp as f64, (tp + fp) as f64);
        let r = safe_div(tp as f64, (tp + fneg) as f64);
        precision.push(p);
        recall.push(r);
        f1.push(safe_div(2.0 * p * r, p + r));
        support.push(tp + fneg);
    }
    let weigh = |v: &[f64]| v.iter().zip(&support).map(|(x, &s)| x * s as f64).sum::<f64>() / n as f64;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / classes as f64;
    let mp = safe_div(tp_all as f64, (tp_all + fp_all) as f64);
    let mr = safe_div(tp_all as f64, (tp_all + fn_all) as f64);
    BruteMetrics {
        accuracy: correct as f64 / n as f64,
        weighted: [weigh(&precision), weigh(&recall), weigh(&f1)],
        micro: [mp, mr, safe_div(2.0 * mp * mr, mp + mr)],
        macro_avg: [avg(&precision), avg(&recall), avg(&f1)],
        precision,
        recall,
        f1,
        support,
    }
}

/// Largest absolute difference between a report and the brute-force oracle.
pub fn report_vs_oracle(r: &MetricsReport, o: &BruteMetrics) -> f64 {
    let mut worst: f64 = (r.accuracy - o.accuracy).abs();
    let triples = [
        ([r.weighted.precision, r.weighted.recall, r.weighted.f1], o.weighted),
        ([r.micro.precision, r.micro.recall, r.micro.f1], o.micro),
        ([r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1], o.macro_avg),
    ];
    for (got, want) in triples {
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    for (k, m) in r.per_class.iter().enumerate() {
        assert_eq!(m.support as usize, o.support[k]);
        worst = worst
            .max((m.precision - o.precision[k]).abs())
            .max((m.recall - o.recall[k]).abs())
            .max((m.f1 - o.f1[k]).abs());
    }
    worst
}

/// Scalar AdamW written out step by step: returns the iterates w_1..w_T.
pub fn adamw_scalar(w0: f64, grads: impl Fn(f64) -> f64, lr: impl Fn(u64) -> f64, wd: f64, steps: u64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = grads(w);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        let a = lr(t - 1);
        w = w - a * mh / (vh.sqrt() + eps) - a * wd * w;
        out.push(w);
    }
    out
}

pub fn tiny_config(vocab_size: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        hidden: 32,
        layers: 1,
        heads: 2,
        ffn: 64,
        max_len: 32,
        dropout: 0.3,
        encoder_dropout: 0.1,
        num_classes: classes,
        head_mode: HeadMode::default_for(classes),
    }
}

/// Settings under which the tiny model fits a separable corpus quickly.
pub fn fast_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        train_batch: 8,
        eval_batch: 64,
        max_len: 32,
        base_lr: 1e-3,
        ..TrainConfig::default()
    }
}

pub struct Setup {
    pub vocab: Vocabulary,
    pub config: ModelConfig,
    pub data: Vec<LabeledExample>,
}

pub fn synth_setup(task: TaskSchema, n: usize, separability: f64, seed: u64) -> Setup {
    let data = synth_corpus(task, n, seed, separability).unwrap();
    let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
    let vocab = train_vocab(&texts, 320).unwrap();
    let config = tiny_config(vocab.size(), task.num_classes());
    Setup { vocab, config, data }
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn load_report(name: &str) -> MetricsReport {
    MetricsReport::from_json(&std::fs::read_to_string(fixture_path(name)).unwrap()).unwrap()
}
