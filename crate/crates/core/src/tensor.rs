//! Dense row-major `f32` matrices and the handful of kernels the encoder needs.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// A dense, row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, actual: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and literals.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same("add", other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Self) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row_broadcast", self.shape(), bias.shape()));
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` row, the gradient of a broadcast bias.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        self.block(0, self.rows, start, width)
    }

    pub fn set_col_block(&mut self, start: usize, block: &Self) {
        self.set_block(0, start, block);
    }

    /// Copy of the `nrows x ncols` sub-matrix whose top-left corner is `(r0, c0)`.
    pub fn block(&self, r0: usize, nrows: usize, c0: usize, ncols: usize) -> Self {
        let mut out = Self::zeros(nrows, ncols);
        for r in 0..nrows {
            out.row_mut(r).copy_from_slice(&self.row(r0 + r)[c0..c0 + ncols]);
        }
        out
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Self) {
        for r in 0..block.rows {
            self.row_mut(r0 + r)[c0..c0 + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    fn check_same(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// How an operand enters a product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    N,
    T,
}

fn gemm(a: &Tensor2D, ta: Op, b: &Tensor2D, tb: Op, op: &'static str) -> Result<Tensor2D> {
    let m = if ta == Op::N { a.rows } else { a.cols };
    let n = if tb == Op::N { b.cols } else { b.rows };
    let mut out = Tensor2D::zeros(m, n);
    gemm_into(a, ta, b, tb, 0.0, &mut out, op)?;
    Ok(out)
}

/// `out = op(a) · op(b) + beta · out`
fn gemm_into(a: &Tensor2D, ta: Op, b: &Tensor2D, tb: Op, beta: f32, out: &mut Tensor2D, op: &'static str) -> Result<()> {
    let (m, k) = match ta {
        Op::N => (a.rows, a.cols),
        Op::T => (a.cols, a.rows),
    };
    let (k2, n) = match tb {
        Op::N => (b.rows, b.cols),
        Op::T => (b.cols, b.rows),
    };
    if k != k2 {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if out.shape() != (m, n) {
        return Err(Error::shape(op, out.shape(), (m, n)));
    }
    if m == 0 || n == 0 || k == 0 {
        return Ok(());
    }
    let (rsa, csa) = match ta {
        Op::N => (a.cols as isize, 1),
        Op::T => (1, a.cols as isize),
    };
    let (rsb, csb) = match tb {
        Op::N => (b.cols as isize, 1),
        Op::T => (1, b.cols as isize),
    };
    // SAFETY: strides describe exactly the row-major buffers of `a`, `b` and `out`,
    // whose lengths were checked against their shapes on construction.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    gemm(a, Op::N, b, Op::N, "matmul")
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    gemm(a, Op::T, b, Op::N, "matmul_tn")
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    gemm(a, Op::N, b, Op::T, "matmul_nt")
}

/// `out += aᵀ · b`
pub fn matmul_tn_acc(a: &Tensor2D, b: &Tensor2D, out: &mut Tensor2D) -> Result<()> {
    gemm_into(a, Op::T, b, Op::N, 1.0, out, "matmul_tn_acc")
}

/// `out += a · bᵀ`
pub fn matmul_nt_acc(a: &Tensor2D, b: &Tensor2D, out: &mut Tensor2D) -> Result<()> {
    gemm_into(a, Op::N, b, Op::T, 1.0, out, "matmul_nt_acc")
}

/// I.i.d. Gaussian matrix drawn from `rng`.
pub fn normal_init(rows: usize, cols: usize, mean: f32, std: f32, rng: &mut RngState) -> Result<Tensor2D> {
    if !(std > 0.0 && std.is_finite()) || !mean.is_finite() {
        return Err(Error::InvalidParameter(format!("normal_init needs finite mean and std > 0, got mean={mean} std={std}")));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let data = (0..rows * cols).map(|_| dist.sample(rng.inner())).collect();
    Ok(Tensor2D { rows, cols, data })
}

/// Cosine similarity of two equal-length vectors; 0 when either is all-zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
        let mut out = Tensor2D::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f64;
                for k in 0..a.cols() {
                    s += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
                out.set(i, j, s as f32);
            }
        }
        out
    }

    #[test]
    fn identity_times_m_is_m() {
        let mut rng = RngState::new(3);
        let m = normal_init(3, 3, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(matmul(&Tensor2D::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Tensor2D::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor2D::from_rows(&[[1.0], [1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Tensor2D::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = RngState::new(11);
        let a = normal_init(5, 7, 0.0, 1.0, &mut rng).unwrap();
        let b = normal_init(7, 3, 0.0, 1.0, &mut rng).unwrap();
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = RngState::new(5);
        let a = normal_init(4, 6, 0.0, 1.0, &mut rng).unwrap();
        let b = normal_init(4, 3, 0.0, 1.0, &mut rng).unwrap();
        let c = normal_init(5, 6, 0.0, 1.0, &mut rng).unwrap();
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = naive(&a.transpose(), &b);
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = naive(&a, &c.transpose());
        for (g, w) in tn.data().iter().zip(tn_ref.data()).chain(nt.data().iter().zip(nt_ref.data())) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = matmul(&Tensor2D::zeros(2, 3), &Tensor2D::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(err, Error::Shape { lhs: (2, 3), rhs: (2, 3), .. }));
    }

    #[test]
    fn normal_init_statistics() {
        let mut rng = RngState::new(42);
        let t = normal_init(100, 100, 0.0, 0.04, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var.sqrt() - 0.04).abs() < 0.01);
    }

    #[test]
    fn normal_init_rejects_degenerate_std() {
        let mut rng = RngState::new(1);
        assert!(matches!(normal_init(2, 2, 0.0, 0.0, &mut rng), Err(Error::InvalidParameter(_))));
        assert!(normal_init(2, 2, 0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn normal_init_is_deterministic() {
        let a = normal_init(8, 8, 0.0, 1.0, &mut RngState::new(9)).unwrap();
        let b = normal_init(8, 8, 0.0, 1.0, &mut RngState::new(9)).unwrap();
        let bits = |t: &Tensor2D| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
    }
}
