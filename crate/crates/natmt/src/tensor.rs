//! Dense 64-bit float tensors and the raw matrix kernels behind the tape.
//!
//! Shapes are row-major. The trailing dimension is the feature axis for
//! every normalization/softmax/linear-algebra routine; all leading
//! dimensions are treated as a flat row count.

use rayon::prelude::*;

use crate::error::TensorError;

/// Dense tensor of 64-bit floats with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows when the tensor is viewed as (rows, trailing).
    pub fn rows(&self) -> usize {
        match self.shape.split_last() {
            Some((last, lead)) => {
                if *last == 0 {
                    0
                } else {
                    lead.iter().product::<usize>().max(1)
                }
            }
            None => 0,
        }
    }

    /// Trailing dimension size.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// NaN/Inf anywhere in the values is a detectable error state.
    pub fn validate_finite(&self, what: &str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NotFinite {
                what: what.to_string(),
            })
        }
    }
}

/// C[m,n] = A[m,k] x B[k,n]. Rows of C are computed independently, each with
/// a fixed accumulation order, so results do not depend on thread count.
pub fn matmul_mk_kn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, c: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        c.iter_mut().for_each(|v| *v = 0.0);
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, c)| row(i, c));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, c)| row(i, c));
    }
}

/// C[m,n] = A[m,k] x B^T where B is stored as [n,k].
pub fn matmul_mk_nk(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, c: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cv) in c.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in ar.iter().zip(br) {
                s += av * bv;
            }
            *cv = s;
        }
    };
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, c)| row(i, c));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, c)| row(i, c));
    }
}

/// C[k,n] += A^T x G where A is [m,k] and G is [m,n]. Partial sums are
/// reduced in a fixed chunk order to stay deterministic under rayon.
pub fn matmul_tn_accum(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    const CHUNK: usize = 256;
    let accumulate = |range: std::ops::Range<usize>| {
        let mut local = vec![0.0; k * n];
        for i in range {
            let ar = &a[i * k..(i + 1) * k];
            let gr = &g[i * n..(i + 1) * n];
            for (p, &av) in ar.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let lr = &mut local[p * n..(p + 1) * n];
                for (lv, &gv) in lr.iter_mut().zip(gr) {
                    *lv += av * gv;
                }
            }
        }
        local
    };
    if m > CHUNK && m * k * n >= 1 << 16 {
        let ranges: Vec<_> = (0..m)
            .step_by(CHUNK)
            .map(|s| s..(s + CHUNK).min(m))
            .collect();
        let partials: Vec<Vec<f64>> = ranges.into_par_iter().map(accumulate).collect();
        for part in partials {
            for (o, p) in out.iter_mut().zip(part) {
                *o += p;
            }
        }
    } else {
        let part = accumulate(0..m);
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
}
