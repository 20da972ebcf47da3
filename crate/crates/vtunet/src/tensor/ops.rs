//! Differentiable tensor operations.
//!
//! Each op computes its forward value, then hands [`Tensor::from_op`] a lazy
//! backward-closure builder. The builder only runs when an operand is tracked,
//! so untracked (inference) calls pay nothing for autodiff.

use std::cell::Cell;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Resets this thread's multiply-add counter.
pub fn reset_mac_count() {
    MAC_COUNT.with(|c| c.set(0));
}

/// Multiply-adds performed by `matmul`/`linear` forward passes on this
/// thread since the last reset. Backward passes, bias adds, and all
/// elementwise work are excluded — the counter follows the usual
/// projection/attention accounting convention.
pub fn mac_count() -> u64 {
    MAC_COUNT.with(|c| c.get())
}

/// Below this many multiply-adds a matmul stays on one thread; above it the
/// output rows are split across the rayon pool. Each output element is always
/// accumulated in the same k-order, so results are identical either way.
const PAR_THRESHOLD: usize = 1 << 16;

// ── broadcasting helpers ──────────────────────────────────────────────────

/// Right-aligned broadcast of two shapes; dims must match or be 1.
fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` laid out against `out` (right-aligned), with stride 0
/// on broadcast dims so the same element is revisited.
fn broadcast_strides(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Odometer walk over `out_shape`, yielding (flat index, offset in a, offset
/// in b) so both forward and backward touch operands without materialising
/// broadcast copies.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let (mut ao, mut bo) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, ao, bo);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ao += sa[d];
            bo += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= sa[d] * out_shape[d];
            bo -= sb[d] * out_shape[d];
        }
    }
}

/// Shared plumbing for broadcasting binary ops. `df(a, b, g)` returns the
/// gradient increments for both operands at one lattice site.
fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
) -> Result<Tensor> {
    let out_shape = broadcast_shapes(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(&out_shape, a.shape());
    let sb = broadcast_strides(&out_shape, b.shape());
    let n: usize = out_shape.iter().product();
    let mut data = vec![0.0; n];
    {
        let (ad, bd) = (a.data(), b.data());
        for_each_bcast(&out_shape, &sa, &sb, |i, ao, bo| data[i] = f(ad[ao], bd[bo]));
    }
    let shape_c = out_shape.clone();
    let (a_arc, b_arc) = (a.data_arc(), b.data_arc());
    let (a_len, b_len) = (a.numel(), b.numel());
    Tensor::from_op(op, &[a, b], Arc::new(data), out_shape, move || {
        Box::new(move |g: &[f64]| {
            let mut ga = vec![0.0; a_len];
            let mut gb = vec![0.0; b_len];
            for_each_bcast(&shape_c, &sa, &sb, |i, ao, bo| {
                let (da, db) = df(a_arc[ao], b_arc[bo], g[i]);
                ga[ao] += da;
                gb[bo] += db;
            });
            vec![ga, gb]
        })
    })
}

/// Shared plumbing for elementwise unary ops. `df(x, y, g)` sees the input,
/// the already-computed output, and the incoming gradient.
fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let out = Arc::new(data);
    let (x_arc, y_arc) = (x.data_arc(), out.clone());
    Tensor::from_op(op, &[x], out, x.shape().to_vec(), move || {
        Box::new(move |g: &[f64]| {
            vec![g
                .iter()
                .enumerate()
                .map(|(i, &gi)| df(x_arc[i], y_arc[i], gi))
                .collect()]
        })
    })
}

// ── raw matmul kernels (used by forward and backward) ─────────────────────

/// Batched `out[bi] = a[bi] @ b[bi]` (or a shared 2-D `b`). Accumulation
/// order over k is fixed per output element regardless of threading.
fn mm_batch(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    let body = |r: usize, orow: &mut [f64]| {
        let bi = r / m;
        let i = r % m;
        let arow = &a[(bi * m + i) * k..][..k];
        let bmat = if shared_b { b } else { &b[bi * k * n..][..k * n] };
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bmat[kk * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if batch * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, orow)| body(r, orow));
    } else {
        out.chunks_mut(n)
            .enumerate()
            .for_each(|(r, orow)| body(r, orow));
    }
    out
}

/// Transpose a dense r×c block.
fn t2(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

impl Tensor {
    // ── elementwise arithmetic ────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        unary("scale", self, |x| x * c, move |_, _, g| g * c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary("add_scalar", self, |x| x + c, |_, _, g| g)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary("exp", self, |x| x.exp(), |_, y, g| y * g)
    }

    /// Natural logarithm. Non-positive inputs surface as a numeric error.
    pub fn log(&self) -> Result<Tensor> {
        unary("log", self, |x| x.ln(), |x, _, g| g / x)
    }

    /// Exact (erf-based) Gaussian error linear unit.
    pub fn gelu(&self) -> Result<Tensor> {
        unary("gelu", self, gelu_scalar, |x, _, g| g * dgelu_scalar(x))
    }

    // ── matmul and linear ─────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] @ [.., k, n]`.
    ///
    /// Leading batch dims must match exactly, or `other` may be a plain 2-D
    /// matrix shared across the batch (the weight case).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (ra, rb) = (self.shape().len(), other.shape().len());
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let shared_b = rb == 2 && ra >= 2;
        if !shared_b && (rb != ra || self.shape()[..ra - 2] != other.shape()[..rb - 2]) {
            return Err(mismatch());
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (kb, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batch: usize = self.shape()[..ra - 2].iter().product();
        MAC_COUNT.with(|c| c.set(c.get() + (batch * m * k * n) as u64));
        let data = mm_batch(self.data(), other.data(), batch, m, k, n, shared_b);
        let mut out_shape = self.shape()[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        let (a_arc, b_arc) = (self.data_arc(), other.data_arc());
        Tensor::from_op(
            "matmul",
            &[self, other],
            Arc::new(data),
            out_shape,
            move || {
                Box::new(move |g: &[f64]| {
                    // ga[bi] = g[bi] @ b[bi]^T
                    let bt: Vec<f64> = if shared_b {
                        t2(&b_arc, k, n)
                    } else {
                        let mut all = Vec::with_capacity(batch * n * k);
                        for bi in 0..batch {
                            all.extend(t2(&b_arc[bi * k * n..][..k * n], k, n));
                        }
                        all
                    };
                    let ga = mm_batch(g, &bt, batch, m, n, k, shared_b);
                    // gb[bi] = a[bi]^T @ g[bi]; shared weights sum over batch
                    let mut at = Vec::with_capacity(batch * k * m);
                    for bi in 0..batch {
                        at.extend(t2(&a_arc[bi * m * k..][..m * k], m, k));
                    }
                    let gb_full = mm_batch(&at, g, batch, k, m, n, false);
                    let gb = if shared_b {
                        let mut acc = vec![0.0; k * n];
                        for bi in 0..batch {
                            for (s, v) in acc.iter_mut().zip(&gb_full[bi * k * n..][..k * n]) {
                                *s += v;
                            }
                        }
                        acc
                    } else {
                        gb_full
                    };
                    vec![ga, gb]
                })
            },
        )
    }

    /// Affine map on the last dim: `x @ w + b`, with `w: [in, out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd == 0 || w.shape().len() != 2 || self.shape()[nd - 1] != w.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        let rows = self.numel() / in_dim;
        let y = self.reshape(&[rows, in_dim])?.matmul(w)?;
        let mut out_shape = self.shape().to_vec();
        out_shape[nd - 1] = out_dim;
        let y = y.reshape(&out_shape)?;
        match b {
            Some(b) => {
                if b.shape() != [out_dim] {
                    return Err(Error::ShapeMismatch {
                        op: "linear",
                        lhs: b.shape().to_vec(),
                        rhs: vec![out_dim],
                    });
                }
                y.add(b)
            }
            None => Ok(y),
        }
    }

    // ── row-structured ops over the last dim ──────────────────────────────

    /// Numerically stable softmax over the last dim (max-subtracted).
    pub fn softmax_last(&self) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_last",
                lhs: self.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let w = self.shape()[nd - 1];
        let rows = self.numel() / w;
        let x = self.data();
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &x[r * w..][..w];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &v) in data[r * w..][..w].iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in data[r * w..][..w].iter_mut() {
                *o /= s;
            }
        }
        let out = Arc::new(data);
        let y_arc = out.clone();
        Tensor::from_op(
            "softmax_last",
            &[self],
            out,
            self.shape().to_vec(),
            move || {
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let y = &y_arc[r * w..][..w];
                        let gr = &g[r * w..][..w];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yi), &gi) in dx[r * w..][..w].iter_mut().zip(y).zip(gr) {
                            *d = yi * (gi - dot);
                        }
                    }
                    vec![dx]
                })
            },
        )
    }

    /// Layer normalisation over the last dim with affine parameters.
    ///
    /// Uses the biased variance; `eps` sits inside the square root.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let nd = self.shape().len();
        let w = *self.shape().last().ok_or(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: self.shape().to_vec(),
            rhs: vec![0],
        })?;
        if gamma.shape() != [w] || beta.shape() != [w] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: gamma.shape().to_vec(),
                rhs: vec![w],
            });
        }
        let _ = nd;
        let rows = self.numel() / w;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut data = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * w..][..w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..w {
                let h = (row[j] - mean) * inv;
                xhat[r * w + j] = h;
                data[r * w + j] = h * gm[j] + bt[j];
            }
        }
        let gamma_arc = gamma.data_arc();
        Tensor::from_op(
            "layer_norm",
            &[self, gamma, beta],
            Arc::new(data),
            self.shape().to_vec(),
            move || {
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; rows * w];
                    let mut dgamma = vec![0.0; w];
                    let mut dbeta = vec![0.0; w];
                    for r in 0..rows {
                        let h = &xhat[r * w..][..w];
                        let gr = &g[r * w..][..w];
                        let mut m1 = 0.0; // mean of dxhat
                        let mut m2 = 0.0; // mean of dxhat * xhat
                        for j in 0..w {
                            let dh = gr[j] * gamma_arc[j];
                            m1 += dh;
                            m2 += dh * h[j];
                            dgamma[j] += gr[j] * h[j];
                            dbeta[j] += gr[j];
                        }
                        m1 /= w as f64;
                        m2 /= w as f64;
                        let inv = inv_std[r];
                        for j in 0..w {
                            let dh = gr[j] * gamma_arc[j];
                            dx[r * w + j] = inv * (dh - m1 - h[j] * m2);
                        }
                    }
                    vec![dx, dgamma, dbeta]
                })
            },
        )
    }

    // ── gathers and reductions ────────────────────────────────────────────

    /// Selects rows of a 2-D tensor; backward scatter-adds into the source,
    /// so repeated indices accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (rows, w) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut data = vec![0.0; idx.len() * w];
        for (o, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    rows,
                });
            }
            data[o * w..][..w].copy_from_slice(&x[r * w..][..w]);
        }
        let idx_c: Vec<usize> = idx.to_vec();
        let out_shape = vec![idx.len(), w];
        Tensor::from_op("gather_rows", &[self], Arc::new(data), out_shape, move || {
            Box::new(move |g: &[f64]| {
                let mut dx = vec![0.0; rows * w];
                for (o, &r) in idx_c.iter().enumerate() {
                    for (d, v) in dx[r * w..][..w].iter_mut().zip(&g[o * w..][..w]) {
                        *d += v;
                    }
                }
                vec![dx]
            })
        })
    }

    /// Sum over the last dim, keeping it as size 1.
    pub fn sum_last(&self) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd == 0 {
            return Err(Error::ShapeMismatch {
                op: "sum_last",
                lhs: self.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let w = self.shape()[nd - 1];
        let rows = self.numel() / w;
        let x = self.data();
        let data: Vec<f64> = (0..rows).map(|r| x[r * w..][..w].iter().sum()).collect();
        let mut out_shape = self.shape().to_vec();
        out_shape[nd - 1] = 1;
        Tensor::from_op("sum_last", &[self], Arc::new(data), out_shape, move || {
            Box::new(move |g: &[f64]| {
                let mut dx = vec![0.0; rows * w];
                for r in 0..rows {
                    dx[r * w..][..w].fill(g[r]);
                }
                vec![dx]
            })
        })
    }

    /// Sum over the leading dim, dropping it.
    pub fn sum_axis0(&self) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd == 0 {
            return Err(Error::ShapeMismatch {
                op: "sum_axis0",
                lhs: self.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let n0 = self.shape()[0];
        let rest = self.numel() / n0.max(1);
        let x = self.data();
        let mut data = vec![0.0; rest];
        for i in 0..n0 {
            for (d, v) in data.iter_mut().zip(&x[i * rest..][..rest]) {
                *d += v;
            }
        }
        let out_shape = self.shape()[1..].to_vec();
        Tensor::from_op("sum_axis0", &[self], Arc::new(data), out_shape, move || {
            Box::new(move |g: &[f64]| {
                let mut dx = vec![0.0; n0 * rest];
                for i in 0..n0 {
                    dx[i * rest..][..rest].copy_from_slice(g);
                }
                vec![dx]
            })
        })
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&self) -> Result<Tensor> {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op("sum_all", &[self], Arc::new(vec![total]), vec![], move || {
            Box::new(move |g: &[f64]| vec![vec![g[0]; n]])
        })
    }

    /// Mean of every element, as a rank-0 scalar.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    // ── non-differentiable helpers ────────────────────────────────────────

    /// Per-row maximum over the last dim, returned as an untracked `[.., 1]`
    /// constant — the detached pivot for stable log-sum-exp.
    pub fn max_last_detached(&self) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd == 0 {
            return Err(Error::ShapeMismatch {
                op: "max_last_detached",
                lhs: self.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let w = self.shape()[nd - 1];
        let rows = self.numel() / w;
        let x = self.data();
        let data: Vec<f64> = (0..rows)
            .map(|r| x[r * w..][..w].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut out_shape = self.shape().to_vec();
        out_shape[nd - 1] = 1;
        Tensor::from_vec(data, &out_shape)
    }

    /// Index of the per-row maximum over the last dim (first index on ties).
    pub fn argmax_last(&self) -> Result<Vec<usize>> {
        let nd = self.shape().len();
        if nd == 0 {
            return Err(Error::ShapeMismatch {
                op: "argmax_last",
                lhs: self.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let w = self.shape()[nd - 1];
        let rows = self.numel() / w;
        let x = self.data();
        Ok((0..rows)
            .map(|r| {
                let row = &x[r * w..][..w];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Swap the last two dims (differentiable; materialises a copy).
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose_last2",
                lhs: self.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (r, c) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let batch: usize = self.shape()[..nd - 2].iter().product();
        let mut idx = Vec::with_capacity(self.numel());
        for b in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    idx.push(b * r * c + i * c + j);
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(nd - 2, nd - 1);
        self.reshape(&[self.numel(), 1])?
            .gather_rows(&idx)?
            .reshape(&out_shape)
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn dgelu_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}
