//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to a [`Tape`] holding its output value and
//! whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes in exact reverse order, so a variable consumed by several operations
//! receives the sum of their contributions.
//!
//! The op set is deliberately narrow: it covers what a post-layernorm
//! transformer encoder with a classification head needs, nothing more.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("index {index} out of range for table of {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropoutRate(f64),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite in grad check")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, factor: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    Dropout { a: Var, multiplier: Vec<f64> },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    Concat { parts: Vec<Var> },
    SliceRows { a: Var, rows: Vec<usize> },
    SplitHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
fn gemm_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// (batch, m, k, n) for a 2-D or batched 3-D product.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Some((1, a[0], a[1], b[1])),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Some((a[0], a[1], a[2], b[2])),
        _ => None,
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last backward pass, if `v` was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n) = matmul_dims(sa, sb).ok_or_else(|| mismatch("matmul", sa, sb))?;
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        for t in 0..batch {
            gemm_acc(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::MatMul { a, b }))
    }

    /// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(mismatch("transpose", &s, &[])),
        };
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; src.len()];
        for t in 0..batch {
            let base = t * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        Ok(self.push(Tensor { shape, data: out }, Op::Transpose { a }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("add", sa, sb));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }))
    }

    /// Adds a vector along the last dimension of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let n = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(mismatch("add_bias", sa, sb));
        }
        let bv = &self.nodes[bias.0].value.data;
        let data = self.nodes[a.0]
            .value
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * factor).collect(),
        };
        self.push(out, Op::Scale { a, factor })
    }

    /// Gathers rows of a `[rows, dim]` table: output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(mismatch("embedding", s, &[]));
        }
        let (rows, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, rows });
        }
        let tv = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), dim],
                data,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Layer normalization over the last dimension.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let h = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            let sp = self.shape(p);
            if sp.len() != 1 || sp[0] != h {
                return Err(mismatch("layernorm", &sx, sp));
            }
        }
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let rows = xv.len() / h.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..h {
                let xh = (row[j] - mean) * is;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor { shape: sx, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        self.push(out, Op::Relu { a })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v
                .data
                .iter()
                .map(|&x| 0.5 * x * (1.0 + erf(x * INV_SQRT_2)))
                .collect(),
        };
        self.push(out, Op::Gelu { a })
    }

    /// Softmax over the last dimension. Where `mask` is given (one flag per
    /// element, `false` = excluded) excluded entries get probability exactly 0.
    /// A row with every entry excluded yields all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if let Some(m) = mask {
            if m.len() != v.numel() {
                return Err(mismatch("softmax", &v.shape, &[m.len()]));
            }
        }
        let n = v.last_dim();
        let mut out = vec![0.0; v.numel()];
        for (r, row) in v.data.chunks(n).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[r * n + j] = e;
                    total += e;
                }
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o /= total;
            }
        }
        let shape = v.shape.clone();
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { a }))
    }

    /// Inverted dropout. Identity (the same `Var`) unless `train` and `rate > 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::BadDropoutRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let v = &self.nodes[a.0].value;
        let multiplier: Vec<f64> = (0..v.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&multiplier).map(|(x, m)| x * m).collect(),
        };
        Ok(self.push(out, Op::Dropout { a, multiplier }))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("cross_entropy", s, &[labels.len()]));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange { label: bad, classes });
        }
        let lv = &self.nodes[logits.0].value.data;
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[y];
            for j in 0..classes {
                probs[i * classes + j] = (row[j] - lse).exp();
            }
        }
        loss /= batch as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
    /// `logits` is `[batch, 1]` or `[batch]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let ok = match s.len() {
            1 => s[0] == labels.len(),
            2 => s[0] == labels.len() && s[1] == 1,
            _ => false,
        };
        if !ok {
            return Err(mismatch("bce_with_logits", s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(AutodiffError::LabelOutOfRange {
                label: bad,
                classes: 2,
            });
        }
        let targets: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let zv = &self.nodes[logits.0].value.data;
        let loss = zv
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: targets,
            },
        ))
    }

    /// Concatenates along the first dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", &[], &[]))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Selects rows of `a` viewed as `[rows, last_dim]`: output `[rows.len(), last_dim]`.
    pub fn slice_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let (total, n) = (v.rows(), v.last_dim());
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(AutodiffError::IndexOutOfRange {
                index: bad,
                rows: total,
            });
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&v.data[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), n],
                data,
            },
            Op::SliceRows {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `[batch*seq, heads*dh]` → `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(mismatch("split_heads", &s, &[batch, seq, heads]));
        }
        let hidden = s[1];
        let dh = hidden / heads;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + t) * hidden + h * dh;
                    let to = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![batch * heads, seq, dh],
                data: out,
            },
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(mismatch("merge_heads", &s, &[batch, seq, heads]));
        }
        let dh = s[2];
        let hidden = heads * dh;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + t) * hidden + h * dh;
                    let from = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![batch * seq, hidden],
                data: out,
            },
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(mismatch("reshape", &v.shape, shape));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        Ok(self.push(out, Op::Reshape { a }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean { a })
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    /// Reverse pass from a scalar `loss`. Clears gradients left by any earlier
    /// pass; within one pass, contributions from every use of a node are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Ops borrow their own node immutably while writing to inputs, so take
        // the op out and put it back afterwards.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (batch, m, k, n) = matmul_dims(&sa, &sb).expect("checked at record time");
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                {
                    let av = &self.nodes[a.0].value.data;
                    let bv = &self.nodes[b.0].value.data;
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        gemm_bt_acc(
                            gs,
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                        gemm_at_acc(
                            &av[t * m * k..(t + 1) * m * k],
                            gs,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Transpose { a } => {
                let s = self.shape(*a).to_vec();
                let (batch, r, c) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                let mut ga = vec![0.0; g.len()];
                for t in 0..batch {
                    let base = t * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            ga[base + i * c + j] = g[base + j * r + i];
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[b.0].value.data)
                    .map(|(gi, y)| gi * y)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gi, x)| gi * x)
                    .collect();
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::AddBias { a, bias } => {
                let n = self.shape(*bias)[0];
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(*a, g);
                self.accumulate(*bias, &gb);
            }
            Op::Scale { a, factor } => {
                let ga: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(*a, &ga);
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table).to_vec();
                let dim = s[1];
                let mut gt = vec![0.0; s[0] * dim];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..dim {
                        gt[i * dim + j] += g[row * dim + j];
                    }
                }
                self.accumulate(*table, &gt);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let h = self.shape(*gamma)[0];
                let gam = self.nodes[gamma.0].value.data.clone();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; h];
                let mut gbeta = vec![0.0; h];
                for (r, &is) in inv_std.iter().enumerate() {
                    let off = r * h;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..h {
                        let dy = g[off + j];
                        let xh = xhat[off + j];
                        gg[j] += dy * xh;
                        gbeta[j] += dy;
                        let d = dy * gam[j];
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    let hf = h as f64;
                    for j in 0..h {
                        let d = g[off + j] * gam[j];
                        gx[off + j] = is / hf * (hf * d - sum_d - xhat[off + j] * sum_dx);
                    }
                }
                self.accumulate(*x, &gx);
                self.accumulate(*gamma, &gg);
                self.accumulate(*beta, &gbeta);
            }
            Op::Relu { a } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::Gelu { a } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gi, &x)| {
                        let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                        gi * (cdf + x * pdf)
                    })
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::Softmax { a } => {
                let y = &self.nodes[idx].value;
                let n = y.last_dim();
                let mut ga = vec![0.0; g.len()];
                for (r, (yr, gr)) in y.data.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for j in 0..n {
                        ga[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Dropout { a, multiplier } => {
                let ga: Vec<f64> = g.iter().zip(multiplier).map(|(gi, m)| gi * m).collect();
                self.accumulate(*a, &ga);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * classes + y] -= scale;
                }
                self.accumulate(*logits, &gl);
            }
            Op::BceWithLogits { logits, labels } => {
                let scale = g[0] / labels.len() as f64;
                let gl: Vec<f64> = self.nodes[logits.0]
                    .value
                    .data
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                self.accumulate(*logits, &gl);
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let part = g[off..off + n].to_vec();
                    self.accumulate(p, &part);
                    off += n;
                }
            }
            Op::SliceRows { a, rows } => {
                let v = &self.nodes[a.0].value;
                let n = v.last_dim();
                let mut ga = vec![0.0; v.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        ga[r * n + j] += g[k * n + j];
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            } => {
                let hidden = self.shape(*a)[1];
                let dh = hidden / heads;
                let mut ga = vec![0.0; g.len()];
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let src = (b * seq + t) * hidden + h * dh;
                            let dst = ((b * heads + h) * seq + t) * dh;
                            ga[src..src + dh].copy_from_slice(&g[dst..dst + dh]);
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            } => {
                let dh = self.shape(*a)[2];
                let hidden = heads * dh;
                let mut ga = vec![0.0; g.len()];
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let dst = (b * seq + t) * hidden + h * dh;
                            let src = ((b * heads + h) * seq + t) * dh;
                            ga[src..src + dh].copy_from_slice(&g[dst..dst + dh]);
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Reshape { a } => self.accumulate(*a, g),
            Op::Sum { a } => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(*a, &vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(*a, &vec![g[0] / n as f64; n]);
            }
        }
        self.nodes[idx].op = op;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// finite differences of step `h`. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    if !tape.value(out).item().is_finite() {
        return Err(AutodiffError::NonFinite);
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = eval(&probe)?;
        probe.data[i] = orig - h;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        if !(numeric.is_finite() && a.is_finite()) {
            return Err(AutodiffError::NonFinite);
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
