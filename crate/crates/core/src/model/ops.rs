//! Row-wise kernels shared by the forward and backward passes.

use crate::tensor::Tensor2D;

pub const LN_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: f32 = 0.044_715;

/// Rational minimax tanh, within a few ulp of `f32::tanh` and branch-free so loops vectorize.
#[inline]
pub fn tanh_fast(x: f32) -> f32 {
    let x = x.clamp(-7.905_311, 7.905_311);
    let x2 = x * x;
    let mut p = -2.760_768_5e-16_f32;
    p = p * x2 + 2.000_188e-13;
    p = p * x2 - 8.604_672e-11;
    p = p * x2 + 5.122_297e-8;
    p = p * x2 + 1.485_722_4e-5;
    p = p * x2 + 6.372_619e-4;
    p = p * x2 + 4.893_524_6e-3;
    let mut q = 1.198_258_4e-6_f32;
    q = q * x2 + 1.185_347e-4;
    q = q * x2 + 2.268_434_6e-3;
    q = q * x2 + 4.893_525e-3;
    x * p / q
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(c (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh_fast(GELU_C * (x + GELU_K * x * x * x)))
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let t = tanh_fast(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Saved state of a layer norm for its backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Tensor2D,
    pub inv_std: Vec<f32>,
}

pub fn layer_norm(x: &Tensor2D, gamma: &Tensor2D, beta: &Tensor2D) -> (Tensor2D, LnCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Tensor2D::zeros(rows, cols);
    let mut out = Tensor2D::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let n = cols as f32;
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let o = out.row_mut(r);
        for c in 0..cols {
            o[c] = xhat.get(r, c) * gamma.data()[c] + beta.data()[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(dy: &Tensor2D, cache: &LnCache, gamma: &Tensor2D) -> (Tensor2D, Tensor2D, Tensor2D) {
    let (rows, cols) = dy.shape();
    let mut dx = Tensor2D::zeros(rows, cols);
    let mut dgamma = Tensor2D::zeros(1, cols);
    let mut dbeta = Tensor2D::zeros(1, cols);
    let n = cols as f32;
    let g = gamma.data();
    let mut dxhat = vec![0.0f32; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut sum_d = 0.0f32;
        let mut sum_dx = 0.0f32;
        for c in 0..cols {
            dgamma.data_mut()[c] += dyr[c] * xh[c];
            dbeta.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            sum_d += dxhat[c];
            sum_dx += dxhat[c] * xh[c];
        }
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = is / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(x: &mut Tensor2D) {
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Gradient through a row softmax given its output `p` and upstream `dp`.
pub fn softmax_rows_backward(p: &Tensor2D, dp: &Tensor2D) -> Tensor2D {
    let mut ds = Tensor2D::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let dr = dp.row(r);
        let dot: f32 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (&pv, &dv)) in ds.row_mut(r).iter_mut().zip(pr.iter().zip(dr)) {
            *o = pv * (dv - dot);
        }
    }
    ds
}

/// Mean cross-entropy over the listed rows of `logits` and its gradient.
///
/// `targets` pairs a row index with its gold class. Rows not listed get zero
/// gradient. Loss is accumulated in f64.
pub fn cross_entropy(logits: &Tensor2D, targets: &[(usize, usize)]) -> (f64, Tensor2D) {
    let mut grad = Tensor2D::zeros(logits.rows(), logits.cols());
    if targets.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / targets.len() as f32;
    let mut loss = 0.0f64;
    for &(r, gold) in targets {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
        let lse = f64::from(max) + sum.ln();
        loss += lse - f64::from(row[gold]);
        let g = grad.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            g[c] = ((f64::from(v) - lse).exp() as f32) * scale;
        }
        g[gold] -= scale;
    }
    (loss / targets.len() as f64, grad)
}
