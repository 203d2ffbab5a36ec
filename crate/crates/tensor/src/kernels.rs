//! Raw slice kernels shared by the gradient tape and the inference paths.

use crate::error::{Result, TensorError};

/// A strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        Self { data, offset: 0, row_stride: cols, col_stride: 1 }
    }

    pub fn transposed(self) -> Self {
        Self { row_stride: self.col_stride, col_stride: self.row_stride, ..self }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// Strided mutable destination.
pub struct ViewMut<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn row_major(data: &'a mut [f32], cols: usize) -> Self {
        Self { data, offset: 0, row_stride: cols, col_stride: 1 }
    }
}

/// `c = alpha * a(m×k) * b(k×n) + beta * c`.
pub fn gemm_view(m: usize, k: usize, n: usize, alpha: f32, a: View, b: View, beta: f32, c: ViewMut) {
    a.check(m, k);
    b.check(k, n);
    if m > 0 && n > 0 {
        let last = c.offset + (m - 1) * c.row_stride + (n - 1) * c.col_stride;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above for the full m×k, k×n, m×n extents,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Dense row-major `c = op(a) * op(b) + beta * c` where `op(a)` is m×k and `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
    let av = if trans_a { View::row_major(a, m).transposed() } else { View::row_major(a, k) };
    let bv = if trans_b { View::row_major(b, k).transposed() } else { View::row_major(b, n) };
    gemm_view(m, k, n, 1.0, av, bv, beta, ViewMut::row_major(c, n));
}

/// Temperature softmax: `exp(v/τ - max(v/τ)) / Σ exp(...)`.
pub fn softmax(v: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TensorError::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    if v.is_empty() {
        return Err(TensorError::Shape("softmax of an empty vector".into()));
    }
    let inv = 1.0 / temperature as f64;
    let max = v.iter().map(|&x| x as f64 * inv).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(TensorError::Parameter("softmax over all -inf logits".into()));
    }
    if !max.is_finite() {
        return Err(TensorError::NonFinite("softmax"));
    }
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 * inv - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / total) as f32).collect())
}

/// In-place row softmax at unit temperature; `-inf` entries become zero.
pub fn softmax_rows_in_place(x: &mut [f32], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for v in row.iter_mut() {
            *v = fast_exp(*v - max);
            total += *v;
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// exp via range reduction and a degree-6 polynomial, within a few ulp of libm.
/// Inputs below -87 (including -inf) give 0.
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    if !(x >= -87.0) {
        return if x.is_nan() { x } else { 0.0 };
    }
    let x = x.min(88.0);
    // round to nearest via the 1.5·2^23 shifter; avoids a libm call
    let n = (x * std::f32::consts::LOG2_E + 12_582_912.0) - 12_582_912.0;
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

#[inline]
fn tanh(y: f32) -> f32 {
    let y = y.clamp(-15.0, 15.0);
    1.0 - 2.0 / (fast_exp(2.0 * y) + 1.0)
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub const RMS_EPS: f32 = 1e-6;

/// Row-wise RMS normalisation with a learned scale. Returns the per-row inverse RMS.
pub fn rms_norm_rows(x: &[f32], scale: &[f32], out: &mut [f32]) -> Vec<f32> {
    let dim = scale.len();
    let mut inv = Vec::with_capacity(x.len() / dim);
    for (row, orow) in x.chunks(dim).zip(out.chunks_mut(dim)) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / dim as f32;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for ((o, &v), &g) in orow.iter_mut().zip(row).zip(scale) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    inv
}

/// Shape of a packed multi-head attention input `[batch*seq, 3*dim]` (q | k | v).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Multi-head scaled dot-product attention. Returns `(out [batch*seq, dim], probs [batch, heads, seq, seq])`.
pub fn attention_forward(qkv: &[f32], s: AttnShape) -> (Vec<f32>, Vec<f32>) {
    let AttnShape { batch, seq, dim, heads, causal } = s;
    let hd = s.head_dim();
    let stride = 3 * dim;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; batch * seq * dim];
    let mut probs = vec![0.0f32; batch * heads * seq * seq];
    for b in 0..batch {
        let base = b * seq * stride;
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let q = View { data: qkv, offset: base + h * hd, row_stride: stride, col_stride: 1 };
            let k = View { data: qkv, offset: base + dim + h * hd, row_stride: stride, col_stride: 1 };
            gemm_view(seq, hd, seq, scale, q, k.transposed(), 0.0, ViewMut::row_major(p, seq));
            if causal {
                for t in 0..seq {
                    p[t * seq + t + 1..(t + 1) * seq].fill(f32::NEG_INFINITY);
                }
            }
            softmax_rows_in_place(p, seq);
            let v = View { data: qkv, offset: base + 2 * dim + h * hd, row_stride: stride, col_stride: 1 };
            let o = ViewMut { data: &mut out, offset: b * seq * dim + h * hd, row_stride: dim, col_stride: 1 };
            gemm_view(seq, seq, hd, 1.0, View::row_major(p, seq), v, 0.0, o);
        }
    }
    (out, probs)
}

/// Gradient of [`attention_forward`] with respect to the packed qkv input.
pub fn attention_backward(qkv: &[f32], probs: &[f32], dout: &[f32], s: AttnShape) -> Vec<f32> {
    let AttnShape { batch, seq, dim, heads, .. } = s;
    let hd = s.head_dim();
    let stride = 3 * dim;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dqkv = vec![0.0f32; qkv.len()];
    let mut dp = vec![0.0f32; seq * seq];
    for b in 0..batch {
        let base = b * seq * stride;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let q = View { data: qkv, offset: base + h * hd, row_stride: stride, col_stride: 1 };
            let k = View { data: qkv, offset: base + dim + h * hd, row_stride: stride, col_stride: 1 };
            let v = View { data: qkv, offset: base + 2 * dim + h * hd, row_stride: stride, col_stride: 1 };
            let dov = View { data: dout, offset: b * seq * dim + h * hd, row_stride: dim, col_stride: 1 };
            // dV = P^T dO
            gemm_view(
                seq,
                seq,
                hd,
                1.0,
                View::row_major(p, seq).transposed(),
                dov,
                0.0,
                ViewMut { data: &mut dqkv, offset: base + 2 * dim + h * hd, row_stride: stride, col_stride: 1 },
            );
            // dP = dO V^T
            gemm_view(seq, hd, seq, 1.0, dov, v.transposed(), 0.0, ViewMut::row_major(&mut dp, seq));
            // dS = P ∘ (dP - rowsum(dP ∘ P)), folded with the score scale
            for t in 0..seq {
                let prow = &p[t * seq..(t + 1) * seq];
                let drow = &mut dp[t * seq..(t + 1) * seq];
                let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let ds = View::row_major(&dp, seq);
            // dQ = dS K
            gemm_view(
                seq,
                seq,
                hd,
                1.0,
                ds,
                k,
                0.0,
                ViewMut { data: &mut dqkv, offset: base + h * hd, row_stride: stride, col_stride: 1 },
            );
            // dK = dS^T Q
            gemm_view(
                seq,
                seq,
                hd,
                1.0,
                ds.transposed(),
                q,
                0.0,
                ViewMut { data: &mut dqkv, offset: base + dim + h * hd, row_stride: stride, col_stride: 1 },
            );
        }
    }
    dqkv
}
