//! Dense row-major matrices and the handful of deterministic primitives the
//! rest of the crate is built on: one-sided Jacobi SVD, stabilized softmax and
//! top-K masking.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ * y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(&mut out, yi, self.row(i));
            }
        }
        out
    }

    /// `self += scale * a bᵀ`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            if s != 0.0 {
                axpy(self.row_mut(i), s, b);
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != 0.0 {
                    axpy(out.row_mut(i), a, other.row(k));
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Columns `[0, k)` as a new matrix.
    pub fn first_cols(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    /// Rows `[0, k)` as a new matrix.
    pub fn first_rows(&self, k: usize) -> Matrix {
        Matrix {
            rows: k,
            cols: self.cols,
            data: self.data[..k * self.cols].to_vec(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Thin SVD `m = u · diag(s) · vt` with `k = min(rows, cols)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// `u[:, :r] · diag(s[:r]) · vt[:r, :]`
    pub fn reconstruct(&self, r: usize) -> Matrix {
        let r = r.min(self.s.len());
        let mut out = Matrix::zeros(self.u.rows(), self.vt.cols());
        for k in 0..r {
            let col: Vec<f64> = (0..self.u.rows()).map(|i| self.u[(i, k)]).collect();
            out.add_outer(self.s[k], &col, self.vt.row(k));
        }
        out
    }
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Singular values come back sorted non-increasing; ties keep column order.
/// An all-zero input yields all-zero singular values.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(invalid("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(invalid("svd input contains non-finite values"));
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose());
        return Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }
    Ok(svd_tall(m))
}

fn svd_tall(m: &Matrix) -> SvdResult {
    let (rows, n) = m.shape();
    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| m[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a.iter().map(|col| norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u = Matrix::zeros(rows, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..rows {
                u[(i, k)] = a[j][i] / sigma;
            }
        }
        vt.row_mut(k).copy_from_slice(&v[j]);
    }
    SvdResult { u, s, vt }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax input contains non-finite values"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Indices of the `k` largest entries, ordered by value descending; ties go to
/// the lower index.
pub fn top_k_indices(weights: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > weights.len() {
        return Err(invalid(format!(
            "top-k with k = {k} over {} entries",
            weights.len()
        )));
    }
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(invalid("top-k input contains non-finite values"));
    }
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Zeroes all but the `k` largest entries. No renormalization.
pub fn top_k_mask(weights: &[f64], k: usize) -> Result<Vec<f64>> {
    let keep = top_k_indices(weights, k)?;
    let mut out = vec![0.0; weights.len()];
    for i in keep {
        out[i] = weights[i];
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius() / b.frobenius().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn svd_identity() {
        let r = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(r.s, vec![1.0, 1.0]);
    }

    #[test]
    fn svd_diagonal_sorted() {
        let r = svd(&Matrix::from_diag(&[2.0, 3.0, 1.0])).unwrap();
        assert_eq!(r.s, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_zero_matrix_gives_zero_values() {
        let r = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0]);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(svd(&m).is_err());
    }

    #[test]
    fn svd_matches_symmetric_eigensolver() {
        // s² must equal the eigenvalues of MᵀM from an unrelated solver.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 4, 3);
        let r = svd(&m).unwrap();
        assert!(rel_err(&r.reconstruct(3), &m) < 1e-9);

        let na = nalgebra::DMatrix::from_row_slice(4, 3, m.data());
        let gram = na.transpose() * &na;
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (s, e) in r.s.iter().zip(&eig) {
            assert!((s * s - e).abs() < 1e-12, "{s}² vs {e}");
        }
    }

    #[test]
    fn svd_wide_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 3, 7);
        let r = svd(&m).unwrap();
        assert_eq!(r.u.shape(), (3, 3));
        assert_eq!(r.vt.shape(), (3, 7));
        assert!(rel_err(&r.reconstruct(3), &m) < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let a = softmax(&[1.0, 2.0]).unwrap();
        let b = softmax(&[11.0, 12.0]).unwrap();
        assert_eq!(a, b);
        let c = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((c[0] - 0.25).abs() < 1e-15 && (c[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_mask(&[0.2, 0.5, 0.3], 1).unwrap(), vec![0.0, 0.5, 0.0]);
        assert_eq!(top_k_mask(&[0.4, 0.4, 0.2], 1).unwrap(), vec![0.4, 0.0, 0.0]);
        let w = [0.1, 0.6, 0.3];
        assert_eq!(top_k_mask(&w, 3).unwrap(), w.to_vec());
        assert!(top_k_mask(&w, 0).is_err());
        assert!(top_k_mask(&w, 4).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn svd_reconstructs_and_sorts(rows in 1usize..7, cols in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols);
            let r = svd(&m).unwrap();
            prop_assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(r.s.iter().all(|&s| s >= 0.0));
            prop_assert!(rel_err(&r.reconstruct(rows.min(cols)), &m) < 1e-9);
        }

        #[test]
        fn softmax_normalized_and_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn top_k_keeps_selected_values(
            w in prop::collection::vec(0.0f64..1.0, 1..10),
            k_seed in any::<usize>(),
        ) {
            let k = 1 + k_seed % w.len();
            let masked = top_k_mask(&w, k).unwrap();
            let selected = top_k_indices(&w, k).unwrap();
            prop_assert_eq!(selected.len(), k);
            for (i, (&a, &b)) in w.iter().zip(&masked).enumerate() {
                prop_assert!(b <= a);
                if selected.contains(&i) { prop_assert_eq!(a, b); } else { prop_assert_eq!(b, 0.0); }
            }
        }
    }
}
