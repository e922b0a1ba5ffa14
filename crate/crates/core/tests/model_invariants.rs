use dscls::autodiff::Tensor;
use dscls::model::{self, Batch, HeadMode, ModelConfig, HEAD_DROPOUT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(mode: HeadMode, classes: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 300,
        hidden: 32,
        layers: 2,
        heads: 4,
        ffn: 64,
        max_len: 16,
        dropout: HEAD_DROPOUT,
        encoder_dropout: 0.1,
        num_classes: classes,
        head_mode: mode,
    }
}

fn rows(seed: u64, batch: usize, seq: usize) -> (Vec<Vec<u32>>, Vec<Vec<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for _ in 0..batch {
        let len = rng.gen_range(2..=seq);
        let mut r: Vec<u32> = (0..seq).map(|_| rng.gen_range(4..300)).collect();
        r[0] = 2;
        r[len - 1] = 3;
        r[len..].fill(0);
        ids.push(r);
        mask.push((0..seq).map(|i| u8::from(i < len)).collect());
    }
    (ids, mask)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn extra_padding_leaves_logits_unchanged() {
    let cfg = config(HeadMode::Softmax, 3);
    let params = model::init(&cfg, 1).unwrap();
    let (ids, mask) = rows(2, 4, 8);
    let base = model::forward(&params, &cfg, &Batch::new(ids.clone(), mask.clone()).unwrap(), false, 0).unwrap();
    for extra in [1, 5, 8] {
        let pad = |r: &Vec<u32>| r.iter().copied().chain(std::iter::repeat_n(0, extra)).collect::<Vec<_>>();
        let padm = |r: &Vec<u8>| r.iter().copied().chain(std::iter::repeat_n(0, extra)).collect::<Vec<_>>();
        let longer = Batch::new(ids.iter().map(pad).collect(), mask.iter().map(padm).collect()).unwrap();
        let out = model::forward(&params, &cfg, &longer, false, 0).unwrap();
        assert!(max_diff(base.data(), out.data()) <= 1e-9, "extra {extra}");
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let cfg = config(HeadMode::ScalarSigmoid, 2);
    let params = model::init(&cfg, 3).unwrap();
    let (ids, mask) = rows(4, 5, 10);
    let out = model::forward(&params, &cfg, &Batch::new(ids.clone(), mask.clone()).unwrap(), false, 0).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let pids = perm.iter().map(|&i| ids[i].clone()).collect();
    let pmask = perm.iter().map(|&i| mask[i].clone()).collect();
    let pout = model::forward(&params, &cfg, &Batch::new(pids, pmask).unwrap(), false, 0).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert!((pout.data()[j] - out.data()[i]).abs() <= 1e-12);
    }
}

#[test]
fn eval_forward_is_deterministic_and_shaped() {
    let cfg = config(HeadMode::Softmax, 3);
    let params = model::init(&cfg, 5).unwrap();
    let (ids, mask) = rows(6, 4, 16);
    let batch = Batch::new(ids, mask).unwrap();
    let a = model::forward(&params, &cfg, &batch, false, 1).unwrap();
    let b = model::forward(&params, &cfg, &batch, false, 2).unwrap();
    assert_eq!(a.shape(), &[4, 3]);
    assert_eq!(a, b);
}

#[test]
fn zero_layer_model_matches_dense_algebra() {
    let mut cfg = config(HeadMode::Softmax, 3);
    cfg.layers = 0;
    cfg.hidden = 6;
    cfg.heads = 2;
    let mut params = model::init(&cfg, 9).unwrap();
    // Non-trivial biases so every term of the head is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for name in ["pre_classifier.bias", "classifier.bias"] {
        for v in params.get_mut(name).unwrap().data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let ids = vec![vec![2u32, 77]];
    let out = model::forward(&params, &cfg, &Batch::new(ids, vec![vec![1, 1]]).unwrap(), false, 0).unwrap();

    let h = cfg.hidden;
    let tok = params.get("token_embedding").unwrap().data();
    let pos = params.get("position_embedding").unwrap().data();
    let x: Vec<f64> = (0..h).map(|j| tok[2 * h + j] + pos[j]).collect();
    let w1 = params.get("pre_classifier.weight").unwrap().data();
    let b1 = params.get("pre_classifier.bias").unwrap().data();
    let w2 = params.get("classifier.weight").unwrap().data();
    let b2 = params.get("classifier.bias").unwrap().data();
    let hidden: Vec<f64> = (0..h)
        .map(|j| {
            let z: f64 = (0..h).map(|i| x[i] * w1[i * h + j]).sum::<f64>() + b1[j];
            z.max(0.0)
        })
        .collect();
    let want: Vec<f64> = (0..3)
        .map(|c| (0..h).map(|j| hidden[j] * w2[j * 3 + c]).sum::<f64>() + b2[c])
        .collect();
    assert!(max_diff(out.data(), &want) <= 1e-12, "{:?} vs {want:?}", out.data());
}

#[test]
fn zeroed_output_layer_gives_uninformative_probabilities() {
    for (mode, classes) in [(HeadMode::ScalarSigmoid, 2), (HeadMode::Softmax, 3)] {
        let cfg = config(mode, classes);
        let mut params = model::init(&cfg, 11).unwrap();
        params.get_mut("classifier.weight").unwrap().data_mut().fill(0.0);
        params.get_mut("classifier.bias").unwrap().data_mut().fill(0.0);
        let (ids, mask) = rows(12, 3, 8);
        let probs = model::predict_proba(&params, &cfg, &Batch::new(ids, mask).unwrap()).unwrap();
        for row in probs {
            assert!(row.iter().all(|&p| (p - 1.0 / classes as f64).abs() < 1e-15));
        }
        let logits = model::forward(&params, &cfg, &Batch::new(vec![vec![2, 3]], vec![vec![1, 1]]).unwrap(), false, 0).unwrap();
        assert_eq!(model::decide(&cfg, &logits), vec![0]);
    }
}

#[test]
fn probabilities_match_normalized_logits() {
    let cfg = config(HeadMode::Softmax, 3);
    let params = model::init(&cfg, 13).unwrap();
    let (ids, mask) = rows(14, 4, 8);
    let batch = Batch::new(ids, mask).unwrap();
    let logits = model::forward(&params, &cfg, &batch, false, 0).unwrap();
    let probs = model::predict_proba(&params, &cfg, &batch).unwrap();
    for (row, p) in logits.data().chunks(3).zip(probs) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (l, q) in row.iter().zip(p) {
            assert!((l.exp() / z - q).abs() < 1e-14);
        }
    }
}

#[test]
fn parameter_count_closed_form() {
    let cfg = ModelConfig {
        vocab_size: 300,
        hidden: 32,
        layers: 1,
        heads: 4,
        ffn: 64,
        max_len: 16,
        dropout: 0.3,
        encoder_dropout: 0.1,
        num_classes: 2,
        head_mode: HeadMode::Softmax,
    };
    let (v, h, f, p, o) = (300, 32, 64, 16, 2);
    let layer = 4 * (h * h + h) + 2 * (2 * h) + (h * f + f) + (f * h + h);
    let want = v * h + p * h + layer + (h * h + h) + (h * o + o);
    assert_eq!(cfg.param_count(), want);
    let params = model::init(&cfg, 0).unwrap();
    assert_eq!(params.tensors().iter().map(Tensor::numel).sum::<usize>(), want);
}

#[test]
fn head_keeps_hidden_width_and_rate() {
    let cfg = ModelConfig::base(1000, 2);
    let specs = cfg.param_specs();
    let pre = specs.iter().find(|s| s.name == "pre_classifier.weight").unwrap();
    assert_eq!(pre.shape, vec![768, 768]);
    assert_eq!(cfg.dropout, 0.3);
    let cls = specs.iter().find(|s| s.name == "classifier.weight").unwrap();
    assert_eq!(cls.shape, vec![768, 1]);
}

#[test]
fn head_dropout_is_unbiased() {
    let cfg = config(HeadMode::ScalarSigmoid, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let activation: Vec<f64> = (0..32).map(|_| rng.gen_range(0.5..2.0)).collect();
    let samples = 100_000u64;
    let mut sum = vec![0.0; activation.len()];
    for seed in 0..samples {
        let out = model::head_dropout_sample(&cfg, &activation, seed).unwrap();
        for (s, o) in sum.iter_mut().zip(out) {
            *s += o;
        }
    }
    for (s, a) in sum.iter().zip(&activation) {
        let mean = s / samples as f64;
        assert!((mean - a).abs() / a <= 0.02, "mean {mean} vs {a}");
    }
}

#[test]
fn config_errors() {
    let mut cfg = config(HeadMode::Softmax, 3);
    cfg.heads = 5;
    assert_eq!(cfg.validate().unwrap_err().to_string(), "invalid model config: hidden not divisible by heads");
    let bad_sigmoid = config(HeadMode::ScalarSigmoid, 3);
    assert!(bad_sigmoid.validate().is_err());
    let cfg = config(HeadMode::Softmax, 3);
    let params = model::init(&cfg, 0).unwrap();
    let too_long = Batch::new(vec![vec![2; 17]], vec![vec![1; 17]]).unwrap();
    assert!(model::forward(&params, &cfg, &too_long, false, 0).is_err());
    let bad_id = Batch::new(vec![vec![2, 300]], vec![vec![1, 1]]).unwrap();
    assert!(model::forward(&params, &cfg, &bad_id, false, 0).is_err());
}
