//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations record enough metadata to replay adjoints in reverse order.
//! Every op visits the tape exactly once during backward; gradients
//! accumulate additively when a value feeds several consumers.

use crate::error::TensorError;
use crate::tensor::{matmul_mk_kn, matmul_mk_nk, matmul_tn_accum, Tensor};
use rayon::prelude::*;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a: (..., k) x b: (k, n) -> (..., n)
    Matmul { a: Var, b: Var },
    /// a: (B, m, k) x b: (B, k, n) -> (B, m, n)
    Bmm { a: Var, b: Var },
    /// Swap the two trailing dimensions.
    TransposeLast { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// a: (..., n) + bias: (n)
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    LogSigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    /// Softmax over the trailing dimension, with an optional additive mask
    /// applied to the logits first (same shape as `a`).
    SoftmaxLast { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, eps: f64 },
    SumAll { a: Var },
    MeanAll { a: Var },
    /// table: (V, d), ids.len() rows gathered -> (len, d)
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape { a: Var },
    /// Columns [start, start+len) of the trailing dimension.
    SliceLast { a: Var, start: usize, len: usize },
    ConcatLast { parts: Vec<Var> },
    /// Rows [start, start+len) along the first dimension.
    SliceRows { a: Var, start: usize, len: usize },
    /// Stack 2-D parts (t_i, d) into (B, rows, d), zero-padding each part.
    PadStackRows { parts: Vec<Var>, rows: usize },
    /// x: (B, T, d) with mask (B, T) -> per-sentence masked mean (B, d).
    MaskedMeanRows { a: Var, mask: Vec<f64> },
    /// x: (B, d) -> Euclidean norm per row, shape (B).
    L2NormRows { a: Var },
    /// logits: (N, V); weighted mean of -log softmax(logits)[target].
    CrossEntropyMean {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    /// Extra payload (e.g. softmax additive mask), kept out of `Op` to keep
    /// the enum small.
    aux: Option<Vec<f64>>,
}

/// Linear record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(shape: &[usize]) -> String {
    format!("{shape:?}")
}

fn lead_rows(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf from raw parts.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Record a leaf copied from a [`Tensor`], keeping its grad requirement.
    pub fn leaf_from(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Constant leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        self.leaf(shape, data, false)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    // ── arithmetic ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if bsh.len() != 2 || ash.is_empty() || *ash.last().unwrap() != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: "(..., k) x (k, n)".into(),
                got: format!("{} x {}", dims(ash), dims(bsh)),
            });
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = lead_rows(ash);
        let mut out_shape = ash.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        matmul_mk_kn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, out_shape, rg, Op::Matmul { a, b }))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                expected: "(B, m, k) x (B, k, n)".into(),
                got: format!("{} x {}", dims(&ash), dims(&bsh)),
            });
        }
        let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![0.0; bs * m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            if bs > 1 && bs * m * k * n >= 1 << 16 {
                out.par_chunks_mut(m * n).enumerate().for_each(|(i, o)| {
                    matmul_mk_kn(&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n], m, k, n, o);
                });
            } else {
                out.chunks_mut(m * n).enumerate().for_each(|(i, o)| {
                    matmul_mk_kn(&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n], m, k, n, o);
                });
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, vec![bs, m, n], rg, Op::Bmm { a, b }))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        if sh.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose_last",
                expected: "at least 2 dims".into(),
                got: dims(&sh),
            });
        }
        let n = sh.len();
        let (rows, cols) = (sh[n - 2], sh[n - 1]);
        let batch: usize = sh[..n - 2].iter().product();
        let d = &self.nodes[a.0].data;
        let mut out = vec![0.0; d.len()];
        for bidx in 0..batch.max(1) {
            let base = bidx * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = d[base + i * cols + j];
                }
            }
        }
        let mut osh = sh.clone();
        osh[n - 2] = cols;
        osh[n - 1] = rows;
        let rg = self.requires_grad(a);
        Ok(self.push(out, osh, rg, Op::TransposeLast { a }))
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                expected: dims(self.shape(a)),
                got: dims(self.shape(b)),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, sh, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let n = self.shape(a).last().copied().unwrap_or(0);
        if self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                expected: format!("[{n}]"),
                got: dims(self.shape(bias)),
            });
        }
        let bdat = self.nodes[bias.0].data.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdat[i % n])
            .collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        Ok(self.push(out, sh, rg, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(out, sh, rg, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(out, sh, rg, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    /// Numerically stable log(sigmoid(x)).
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    /// Softmax over the trailing dimension. `mask`, when given, is added to
    /// the logits first (use large negative values to exclude positions) and
    /// must have the same shape as `a`. Rows are normalized with
    /// max-subtraction for stability.
    pub fn softmax_last(&mut self, a: Var, mask: Option<Vec<f64>>) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        let n = *sh.last().ok_or(TensorError::EmptyAxis { op: "softmax" })?;
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        if let Some(m) = &mask {
            if m.len() != self.nodes[a.0].data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_mask",
                    expected: dims(&sh),
                    got: format!("mask len {}", m.len()),
                });
            }
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        let apply = |row_idx: usize, o: &mut [f64]| {
            let base = row_idx * n;
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..n {
                let v = src[base + j] + mask.as_ref().map_or(0.0, |m| m[base + j]);
                if v > maxv {
                    maxv = v;
                }
                o[j] = v;
            }
            let mut sum = 0.0;
            for v in o.iter_mut() {
                *v = (*v - maxv).exp();
                sum += *v;
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        };
        let rows = src.len() / n;
        if rows > 64 && src.len() >= 1 << 14 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, o)| apply(i, o));
        } else {
            out.chunks_mut(n).enumerate().for_each(|(i, o)| apply(i, o));
        }
        let rg = self.requires_grad(a);
        let v = self.push(out, sh, rg, Op::SoftmaxLast { a });
        self.nodes[v.0].aux = mask;
        Ok(v)
    }

    /// Layer normalization over the trailing dimension followed by the
    /// affine transform `gain * xhat + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        let d = *sh.last().ok_or(TensorError::EmptyAxis { op: "layer_norm" })?;
        if d == 0 || eps <= 0.0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                expected: format!("gain/bias [{d}]"),
                got: format!("{} / {}", dims(self.shape(gain)), dims(self.shape(bias))),
            });
        }
        let src = &self.nodes[a.0].data;
        let gd = &self.nodes[gain.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = vec![0.0; src.len()];
        for (row, o) in out.chunks_mut(d).enumerate() {
            let x = &src[row * d..(row + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                o[j] = (x[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(out, sh, rg, Op::LayerNorm { a, gain, bias, eps }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.requires_grad(a);
        self.push(vec![s], vec![1], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_all" });
        }
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.requires_grad(a);
        Ok(self.push(vec![s], vec![1], rg, Op::MeanAll { a }))
    }

    /// Gather whole rows of a (V, d) matrix; the embedding lookup primitive.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let sh = self.shape(table).to_vec();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                expected: "(V, d)".into(),
                got: dims(&sh),
            });
        }
        let (v, d) = (sh[0], sh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                size: v,
            });
        }
        let src = &self.nodes[table.0].data;
        let mut out = vec![0.0; ids.len() * d];
        for (r, &i) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: format!("numel {}", self.nodes[a.0].data.len()),
                got: dims(&shape),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.requires_grad(a);
        Ok(self.push(data, shape, rg, Op::Reshape { a }))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        let n = *sh.last().ok_or(TensorError::EmptyAxis { op: "slice_last" })?;
        if start + len > n {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_last",
                index: start + len,
                size: n,
            });
        }
        let rows = lead_rows(&sh);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let mut osh = sh.clone();
        *osh.last_mut().unwrap() = len;
        let rg = self.requires_grad(a);
        Ok(self.push(out, osh, rg, Op::SliceLast { a, start, len }))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_last" });
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let rows = lead_rows(self.shape(parts[0]));
        let mut total = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh[..sh.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    expected: dims(&lead),
                    got: dims(sh),
                });
            }
            total += sh.last().unwrap();
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let n = *self.shape(p).last().unwrap();
            let src = &self.nodes[p.0].data;
            for r in 0..rows {
                out[r * total + off..r * total + off + n].copy_from_slice(&src[r * n..(r + 1) * n]);
            }
            off += n;
        }
        let mut osh = lead;
        osh.push(total);
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, osh, rg, Op::ConcatLast { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        if sh.is_empty() || start + len > sh[0] {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_rows",
                index: start + len,
                size: sh.first().copied().unwrap_or(0),
            });
        }
        let stride: usize = sh[1..].iter().product();
        let src = &self.nodes[a.0].data;
        let out = src[start * stride..(start + len) * stride].to_vec();
        let mut osh = sh.clone();
        osh[0] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(out, osh, rg, Op::SliceRows { a, start, len }))
    }

    /// Stack per-sentence matrices (t_i, d) into a zero-padded (B, rows, d).
    pub fn pad_stack_rows(&mut self, parts: &[Var], rows: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "pad_stack_rows" });
        }
        let d = *self.shape(parts[0]).last().unwrap();
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != 2 || sh[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "pad_stack_rows",
                    expected: format!("(t, {d})"),
                    got: dims(sh),
                });
            }
            if sh[0] > rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "pad_stack_rows",
                    index: sh[0],
                    size: rows,
                });
            }
        }
        let b = parts.len();
        let mut out = vec![0.0; b * rows * d];
        for (i, &p) in parts.iter().enumerate() {
            let t = self.shape(p)[0];
            let src = &self.nodes[p.0].data;
            out[i * rows * d..i * rows * d + t * d].copy_from_slice(src);
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            out,
            vec![b, rows, d],
            rg,
            Op::PadStackRows {
                parts: parts.to_vec(),
                rows,
            },
        ))
    }

    /// Per-sentence mean of unmasked rows: (B, T, d) with mask (B, T) -> (B, d).
    /// Every sentence must have at least one unmasked position.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[f64]) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean_rows",
                expected: "(B, T, d)".into(),
                got: dims(&sh),
            });
        }
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        if mask.len() != b * t {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean_rows",
                expected: format!("mask len {}", b * t),
                got: format!("mask len {}", mask.len()),
            });
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            let cnt: f64 = mask[i * t..(i + 1) * t].iter().sum();
            if cnt <= 0.0 {
                return Err(TensorError::EmptyAxis {
                    op: "masked_mean_rows",
                });
            }
            for j in 0..t {
                let w = mask[i * t + j];
                if w == 0.0 {
                    continue;
                }
                let row = &src[(i * t + j) * d..(i * t + j + 1) * d];
                for (o, &x) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o += w * x;
                }
            }
            for o in out[i * d..(i + 1) * d].iter_mut() {
                *o /= cnt;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            out,
            vec![b, d],
            rg,
            Op::MaskedMeanRows {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Euclidean norm of every row: (B, d) -> (B).
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "l2_norm_rows",
                expected: "(B, d)".into(),
                got: dims(&sh),
            });
        }
        let (b, d) = (sh[0], sh[1]);
        let src = &self.nodes[a.0].data;
        let out: Vec<f64> = (0..b)
            .map(|i| src[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(out, vec![b], rg, Op::L2NormRows { a }))
    }

    /// Weighted mean negative log-likelihood over rows of (N, V) logits.
    /// `weights` are typically the padding mask; the sum of weights must be
    /// positive.
    pub fn cross_entropy_mean(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || targets.len() != sh[0] || weights.len() != sh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_mean",
                expected: format!("(N, V) with N targets/weights, N={}", sh.first().unwrap_or(&0)),
                got: format!("{} targets, {} weights, logits {}", targets.len(), weights.len(), dims(&sh)),
            });
        }
        let (n, v) = (sh[0], sh[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfBounds {
                op: "cross_entropy_mean",
                index: bad,
                size: v,
            });
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(TensorError::EmptyAxis {
                op: "cross_entropy_mean",
            });
        }
        let src = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|&x| (x - maxv).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        loss /= wsum;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradients for every tensor reachable from `loss` that
    /// requires one. Gradients accumulate additively across uses.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.replay(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add_grad(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn replay(&mut self, idx: usize, g: &[f64]) {
        // The borrow dance: compute all input adjoints first (immutable
        // reads), then accumulate them.
        enum Pending {
            One(Var, Vec<f64>),
            Many(Vec<(Var, Vec<f64>)>),
            None,
        }
        let pending = match &self.nodes[idx].op {
            Op::Leaf => Pending::None,
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let bsh = self.shape(b);
                let (k, n) = (bsh[0], bsh[1]);
                let m = lead_rows(self.shape(a));
                let mut pend = Vec::new();
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_mk_nk(g, &self.nodes[b.0].data, m, n, k, &mut da);
                    pend.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_accum(&self.nodes[a.0].data, g, m, k, n, &mut db);
                    pend.push((b, db));
                }
                Pending::Many(pend)
            }
            Op::Bmm { a, b } => {
                let (a, b) = (*a, *b);
                let ash = self.shape(a).to_vec();
                let bsh = self.shape(b).to_vec();
                let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
                let mut pend = Vec::new();
                if self.needs(a) {
                    let mut da = vec![0.0; bs * m * k];
                    let bd = &self.nodes[b.0].data;
                    da.chunks_mut(m * k).enumerate().for_each(|(i, o)| {
                        matmul_mk_nk(&g[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], m, n, k, o);
                    });
                    pend.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; bs * k * n];
                    let ad = &self.nodes[a.0].data;
                    db.chunks_mut(k * n).enumerate().for_each(|(i, o)| {
                        matmul_tn_accum(&ad[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], m, k, n, o);
                    });
                    pend.push((b, db));
                }
                Pending::Many(pend)
            }
            Op::TransposeLast { a } => {
                let a = *a;
                if self.needs(a) {
                    let osh = self.nodes[idx].shape.clone();
                    let nn = osh.len();
                    let (rows, cols) = (osh[nn - 2], osh[nn - 1]);
                    let batch: usize = osh[..nn - 2].iter().product::<usize>().max(1);
                    let mut da = vec![0.0; g.len()];
                    for bi in 0..batch {
                        let base = bi * rows * cols;
                        for i in 0..rows {
                            for j in 0..cols {
                                da[base + j * rows + i] = g[base + i * cols + j];
                            }
                        }
                    }
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let mut pend = Vec::new();
                if self.needs(a) {
                    pend.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    pend.push((b, g.to_vec()));
                }
                Pending::Many(pend)
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let mut pend = Vec::new();
                if self.needs(a) {
                    pend.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    pend.push((b, g.iter().map(|v| -v).collect()));
                }
                Pending::Many(pend)
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let mut pend = Vec::new();
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(&gv, &bv)| gv * bv).collect();
                    pend.push((a, da));
                }
                if self.needs(b) {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].data).map(|(&gv, &av)| gv * av).collect();
                    pend.push((b, db));
                }
                Pending::Many(pend)
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                let n = self.shape(bias)[0];
                let mut pend = Vec::new();
                if self.needs(a) {
                    pend.push((a, g.to_vec()));
                }
                if self.needs(bias) {
                    let mut db = vec![0.0; n];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    pend.push((bias, db));
                }
                Pending::Many(pend)
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.needs(a) {
                    Pending::One(a, g.iter().map(|v| v * c).collect())
                } else {
                    Pending::None
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::Sigmoid { a } => {
                let a = *a;
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].data)
                        .map(|(&gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::LogSigmoid { a } => {
                let a = *a;
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &x)| gv * sigmoid(-x))
                        .collect();
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::Exp { a } => {
                let a = *a;
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].data)
                        .map(|(&gv, &e)| gv * e)
                        .collect();
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::Log { a } => {
                let a = *a;
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &x)| gv / x)
                        .collect();
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::SoftmaxLast { a } => {
                let a = *a;
                if self.needs(a) {
                    let n = *self.nodes[idx].shape.last().unwrap();
                    let s = &self.nodes[idx].data;
                    let mut da = vec![0.0; s.len()];
                    for r in 0..s.len() / n {
                        let base = r * n;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[base + j] * s[base + j];
                        }
                        for j in 0..n {
                            da[base + j] = s[base + j] * (g[base + j] - dot);
                        }
                    }
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let (a, gain, bias, eps) = (*a, *gain, *bias, *eps);
                let d = self.shape(gain)[0];
                let x = &self.nodes[a.0].data;
                let gd = &self.nodes[gain.0].data;
                let rows = x.len() / d;
                let mut da = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let xs = &x[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgain[j] += gs[j] * xhat[j];
                        dbias[j] += gs[j];
                        dxhat[j] = gs[j] * gd[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum();
                    let df = d as f64;
                    for j in 0..d {
                        da[r * d + j] = inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                let mut pend = Vec::new();
                if self.needs(a) {
                    pend.push((a, da));
                }
                if self.needs(gain) {
                    pend.push((gain, dgain));
                }
                if self.needs(bias) {
                    pend.push((bias, dbias));
                }
                Pending::Many(pend)
            }
            Op::SumAll { a } => {
                let a = *a;
                if self.needs(a) {
                    Pending::One(a, vec![g[0]; self.nodes[a.0].data.len()])
                } else {
                    Pending::None
                }
            }
            Op::MeanAll { a } => {
                let a = *a;
                if self.needs(a) {
                    let n = self.nodes[a.0].data.len();
                    Pending::One(a, vec![g[0] / n as f64; n])
                } else {
                    Pending::None
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                if self.needs(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                    Pending::One(table, dt)
                } else {
                    Pending::None
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if self.needs(a) {
                    Pending::One(a, g.to_vec())
                } else {
                    Pending::None
                }
            }
            Op::SliceLast { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                if self.needs(a) {
                    let n = *self.shape(a).last().unwrap();
                    let rows = lead_rows(self.shape(a));
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for r in 0..rows {
                        da[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::ConcatLast { parts } => {
                let parts = parts.clone();
                let total = *self.nodes[idx].shape.last().unwrap();
                let rows = lead_rows(&self.nodes[idx].shape);
                let mut pend = Vec::new();
                let mut off = 0;
                for &p in &parts {
                    let n = *self.shape(p).last().unwrap();
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * n];
                        for r in 0..rows {
                            dp[r * n..(r + 1) * n].copy_from_slice(&g[r * total + off..r * total + off + n]);
                        }
                        pend.push((p, dp));
                    }
                    off += n;
                }
                Pending::Many(pend)
            }
            Op::SliceRows { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                if self.needs(a) {
                    let sh = self.shape(a);
                    let stride: usize = sh[1..].iter().product();
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    da[start * stride..(start + len) * stride].copy_from_slice(g);
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::PadStackRows { parts, rows } => {
                let (parts, rows) = (parts.clone(), *rows);
                let d = *self.nodes[idx].shape.last().unwrap();
                let mut pend = Vec::new();
                for (i, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let t = self.shape(p)[0];
                        let dp = g[i * rows * d..i * rows * d + t * d].to_vec();
                        pend.push((p, dp));
                    }
                }
                Pending::Many(pend)
            }
            Op::MaskedMeanRows { a, mask } => {
                let a = *a;
                if self.needs(a) {
                    let sh = self.shape(a);
                    let (b, t, d) = (sh[0], sh[1], sh[2]);
                    let mut da = vec![0.0; b * t * d];
                    for i in 0..b {
                        let cnt: f64 = mask[i * t..(i + 1) * t].iter().sum();
                        for j in 0..t {
                            let w = mask[i * t + j];
                            if w == 0.0 {
                                continue;
                            }
                            for l in 0..d {
                                da[(i * t + j) * d + l] = w / cnt * g[i * d + l];
                            }
                        }
                    }
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::L2NormRows { a } => {
                let a = *a;
                if self.needs(a) {
                    let sh = self.shape(a);
                    let (b, d) = (sh[0], sh[1]);
                    let x = &self.nodes[a.0].data;
                    let norms = &self.nodes[idx].data;
                    let mut da = vec![0.0; b * d];
                    for i in 0..b {
                        let nv = norms[i].max(1e-12);
                        for j in 0..d {
                            da[i * d + j] = g[i] * x[i * d + j] / nv;
                        }
                    }
                    Pending::One(a, da)
                } else {
                    Pending::None
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                weights,
            } => {
                let logits = *logits;
                if self.needs(logits) {
                    let sh = self.shape(logits);
                    let (n, v) = (sh[0], sh[1]);
                    let src = &self.nodes[logits.0].data;
                    let wsum: f64 = weights.iter().sum();
                    let mut da = vec![0.0; n * v];
                    for i in 0..n {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let row = &src[i * v..(i + 1) * v];
                        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&x| (x - maxv).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        let coeff = g[0] * weights[i] / wsum;
                        for j in 0..v {
                            let p = exps[j] / sum;
                            da[i * v + j] = coeff * (p - if j == targets[i] { 1.0 } else { 0.0 });
                        }
                    }
                    Pending::One(logits, da)
                } else {
                    Pending::None
                }
            }
        };
        match pending {
            Pending::None => {}
            Pending::One(v, d) => self.add_grad(v, d),
            Pending::Many(list) => {
                for (v, d) in list {
                    self.add_grad(v, d);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
