//! Dense f64 matrices and the numerical primitives the rest of the lab
//! builds on: products, Frobenius norms, singular values via Jacobi
//! iteration, and a central-difference gradient oracle.

use crate::error::{Error, Result};

/// Row-major dense matrix of f64. Entries are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Panics on shape mismatch or
    /// non-finite entries; both are caller bugs, not runtime conditions.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix must be at least 1x1");
        assert_eq!(data.len(), rows * cols, "data length != rows*cols");
        assert!(
            data.iter().all(|v| v.is_finite()),
            "matrix entries must be finite"
        );
        Matrix { rows, cols, data }
    }

    /// Internal constructor for outputs of our own arithmetic.
    pub(crate) fn from_computed(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_computed(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Entrywise difference `self - other`.
    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix::from_computed(self.rows, self.cols, data)
    }

    /// `self · other` for row-major operands.
    pub fn gemm_nn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Matrix::from_computed(m, n, out)
    }

    /// `self · otherᵀ`; the workhorse for preactivation blocks, where both
    /// weights and data points are stored row-major.
    pub fn gemm_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimensions must agree");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                1,
                k as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Matrix::from_computed(m, n, out)
    }

    /// `self · Bᵀ` where B is given as a row-major slice of shape
    /// `other_rows x self.cols`. Lets dataset coordinate blocks multiply
    /// without an intermediate copy into a `Matrix`.
    pub(crate) fn gemm_nt_slice(&self, other_rows: usize, other: &[f64]) -> Matrix {
        let (m, k, n) = (self.rows, self.cols, other_rows);
        assert_eq!(other.len(), n * k, "slice shape mismatch");
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.as_ptr(),
                1,
                k as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Matrix::from_computed(m, n, out)
    }

    /// `self · B` where B is given as a row-major slice of shape
    /// `self.cols x other_cols`.
    pub(crate) fn gemm_nn_slice(&self, other_cols: usize, other: &[f64]) -> Matrix {
        let (m, k, n) = (self.rows, self.cols, other_cols);
        assert_eq!(other.len(), k * n, "slice shape mismatch");
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Matrix::from_computed(m, n, out)
    }

    /// `selfᵀ · other` for a row-major `self` of shape k x m.
    pub(crate) fn gemm_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "inner dimensions must agree");
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                1,
                self.cols as isize,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Matrix::from_computed(m, n, out)
    }

    /// Gram matrix of the shorter side: `selfᵀ·self` when `rows >= cols`,
    /// otherwise `self·selfᵀ`.
    fn small_gram(&self) -> Matrix {
        if self.rows >= self.cols {
            self.transposed().gemm_nt(&self.transposed())
        } else {
            self.gemm_nt(self)
        }
    }
}

/// Standard matrix-vector product with 64-bit accumulation.
pub fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), m.cols(), "vector length must equal matrix cols");
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Singular values sorted descending. Squared values sum to the squared
/// Frobenius norm of the source matrix up to 1e-10 relative.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SingularSpectrum {
    values: Vec<f64>,
}

impl SingularSpectrum {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fraction of squared spectral mass carried by the top `j` values.
    /// Zero spectra count as fully concentrated.
    pub fn top_mass(&self, j: usize) -> f64 {
        let total: f64 = self.values.iter().map(|v| v * v).sum();
        if total == 0.0 {
            return 1.0;
        }
        let head: f64 = self.values.iter().take(j).map(|v| v * v).sum();
        head / total
    }
}

const JACOBI_MAX_SWEEPS: usize = 60;
const JACOBI_REL_TOL: f64 = 1e-12;
/// Below this min-dimension the spectrum comes from cyclic Jacobi on the
/// smaller Gram matrix; above it, from one-sided Jacobi on the input.
const GRAM_ROUTE_MAX_DIM: usize = 1024;

/// All singular values of `m`, descending.
pub fn svd_values(m: &Matrix) -> Result<SingularSpectrum> {
    let spectrum = if m.rows().min(m.cols()) <= GRAM_ROUTE_MAX_DIM {
        svd_values_gram(m)?
    } else {
        svd_values_one_sided(m)?
    };
    debug_assert!({
        let f2 = frobenius_norm(m).powi(2);
        let s2: f64 = spectrum.values.iter().map(|v| v * v).sum();
        (s2 - f2).abs() <= 1e-10 * f2.max(1.0)
    });
    Ok(spectrum)
}

/// Gram route: eigenvalues of the smaller Gram matrix by cyclic Jacobi.
pub(crate) fn svd_values_gram(m: &Matrix) -> Result<SingularSpectrum> {
    let gram = m.small_gram();
    let eig = jacobi_eigenvalues(gram)?;
    let mut values: Vec<f64> = eig.into_iter().map(|l| l.max(0.0).sqrt()).collect();
    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(SingularSpectrum { values })
}

/// Eigenvalues of a symmetric matrix by cyclic-by-rows Jacobi rotations.
/// Converged when every off-diagonal entry is at most
/// `JACOBI_REL_TOL x ||G||_F`.
pub(crate) fn jacobi_eigenvalues(mut g: Matrix) -> Result<Vec<f64>> {
    let n = g.rows();
    assert_eq!(n, g.cols(), "jacobi needs a square matrix");
    let tol = JACOBI_REL_TOL * frobenius_norm(&g);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let gpq = g.get(p, q);
                if gpq.abs() <= tol {
                    continue;
                }
                rotated = true;
                let gpp = g.get(p, p);
                let gqq = g.get(q, q);
                let theta = (gqq - gpp) / (2.0 * gpq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // G <- Jᵀ G J: rotate rows p,q, then columns p,q.
                for i in 0..n {
                    let gpi = g.get(p, i);
                    let gqi = g.get(q, i);
                    g.set(p, i, c * gpi - s * gqi);
                    g.set(q, i, s * gpi + c * gqi);
                }
                for i in 0..n {
                    let gip = g.get(i, p);
                    let giq = g.get(i, q);
                    g.set(i, p, c * gip - s * giq);
                    g.set(i, q, s * gip + c * giq);
                }
                g.set(p, q, 0.0);
                g.set(q, p, 0.0);
            }
        }
        if !rotated {
            return Ok((0..n).map(|i| g.get(i, i)).collect());
        }
    }
    Err(Error::SvdNonConvergence {
        sweeps: JACOBI_MAX_SWEEPS,
    })
}

/// One-sided Jacobi: orthogonalize the columns of the (possibly transposed)
/// input; column norms are the singular values. Used when the Gram matrix
/// would be larger than `GRAM_ROUTE_MAX_DIM`.
pub(crate) fn svd_values_one_sided(m: &Matrix) -> Result<SingularSpectrum> {
    // Work with cols <= rows; singular values are transpose-invariant.
    let work = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transposed()
    };
    let (rows, cols) = (work.rows(), work.cols());
    // Column-major copy so each rotation touches contiguous memory.
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get(i, j)).collect())
        .collect();
    // ||AᵀA||_F <= ||A||_F², so this threshold is at least as strict a
    // scale as the Gram-route tolerance.
    let tol = JACOBI_REL_TOL * frobenius_norm(&work).powi(2);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    app += col[p][i] * col[p][i];
                    aqq += col[q][i] * col[q][i];
                    apq += col[p][i] * col[q][i];
                }
                if apq.abs() <= tol {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let (head, tail) = col.split_at_mut(q);
                let cp = &mut head[p];
                let cq = &mut tail[0];
                for i in 0..rows {
                    let vp = cp[i];
                    let vq = cq[i];
                    cp[i] = c * vp - s * vq;
                    cq[i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            let mut values: Vec<f64> = col
                .iter()
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            values.sort_by(|a, b| b.partial_cmp(a).unwrap());
            return Ok(SingularSpectrum { values });
        }
    }
    Err(Error::SvdNonConvergence {
        sweeps: JACOBI_MAX_SWEEPS,
    })
}

/// Central-difference gradient of a scalar function of a matrix, with a
/// per-entry step of `eps * (1 + |entry|)`.
pub fn finite_diff_grad<F>(f: F, at: &Matrix, eps: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let w = at.get(i, j);
            let h = eps * (1.0 + w.abs());
            probe.set(i, j, w + h);
            let fp = f(&probe);
            probe.set(i, j, w - h);
            let fm = f(&probe);
            probe.set(i, j, w);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFiniteEval);
            }
            grad.set(i, j, (fp - fm) / (2.0 * h));
        }
    }
    Ok(grad)
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::from_seed(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    /// Scalar triple-loop reference for matvec.
    fn matvec_oracle(m: &Matrix, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m.rows()];
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out[i] += m.get(i, j) * v[j];
            }
        }
        out
    }

    /// Independent eigen-oracle: classic Jacobi on mᵀm with an absolute
    /// off-diagonal threshold, written separately from the library path.
    pub(crate) fn gram_eigen_oracle(m: &Matrix) -> Vec<f64> {
        let n = m.cols();
        let mut g = vec![vec![0.0f64; n]; n];
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for i in 0..m.rows() {
                    s += m.get(i, a) * m.get(i, b);
                }
                g[a][b] = s;
            }
        }
        let scale: f64 = g
            .iter()
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-300);
        for _ in 0..100 {
            let mut off = 0.0f64;
            let (mut bp, mut bq) = (0, 1.min(n - 1));
            for p in 0..n {
                for q in p + 1..n {
                    if g[p][q].abs() > off {
                        off = g[p][q].abs();
                        bp = p;
                        bq = q;
                    }
                }
            }
            if off <= 1e-14 * scale || n < 2 {
                break;
            }
            let (p, q) = (bp, bq);
            let theta = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
            let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;
            let gv = g.clone();
            for i in 0..n {
                g[p][i] = c * gv[p][i] - s * gv[q][i];
                g[q][i] = s * gv[p][i] + c * gv[q][i];
            }
            let gv = g.clone();
            for i in 0..n {
                g[i][p] = c * gv[i][p] - s * gv[i][q];
                g[i][q] = s * gv[i][p] + c * gv[i][q];
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| g[i][i].max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eig
    }

    #[test]
    fn matvec_identity_zero_and_hand_case() {
        let id = Matrix::identity(3);
        assert_eq!(matvec(&id, &[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);

        let z = Matrix::zeros(2, 2);
        assert_eq!(matvec(&z, &[5.0, 7.0]), vec![0.0, 0.0]);

        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let got = matvec(&m, &[1.0, 1.0]);
        assert_eq!(got, vec![3.0, 7.0]);
        assert_eq!(got, matvec_oracle(&m, &[1.0, 1.0]));
    }

    #[test]
    #[should_panic(expected = "vector length")]
    fn matvec_dimension_mismatch_panics() {
        let m = Matrix::identity(3);
        matvec(&m, &[1.0, 2.0]);
    }

    #[test]
    fn frobenius_trivial_values() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 4)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::identity(4)), 2.0);
        assert_eq!(frobenius_norm(&Matrix::new(1, 2, vec![3.0, 4.0])), 5.0);
    }

    #[test]
    fn svd_zero_and_diagonal() {
        let z = Matrix::zeros(5, 3);
        assert_eq!(svd_values(&z).unwrap().values(), &[0.0, 0.0, 0.0]);

        let mut d = Matrix::zeros(3, 3);
        d.set(0, 0, 3.0);
        d.set(1, 1, 1.0);
        d.set(2, 2, 2.0);
        let s = svd_values(&d).unwrap();
        assert!(s
            .values()
            .iter()
            .zip(&[3.0, 2.0, 1.0])
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn svd_matches_gram_eigen_oracle_on_seeded_matrix() {
        let m = random_matrix(8, 5, 2024);
        let s = svd_values(&m).unwrap();
        let oracle = gram_eigen_oracle(&m);
        assert_eq!(s.len(), 5);
        for (a, b) in s.values().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn one_sided_route_agrees_with_gram_route() {
        for seed in [1u64, 2, 3] {
            let m = random_matrix(12, 7, seed);
            let a = svd_values_gram(&m).unwrap();
            let b = svd_values_one_sided(&m).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= 1e-9 * y.max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn orthogonal_matrix_has_unit_spectrum() {
        // Gram-Schmidt on a seeded random square matrix.
        let n = 12;
        let m = random_matrix(n, n, 99);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let mut v: Vec<f64> = m.row(i).to_vec();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= d * ui;
                }
            }
            let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for vi in v.iter_mut() {
                *vi /= nv;
            }
            q.push(v);
        }
        let qm = Matrix::new(n, n, q.into_iter().flatten().collect());
        let s = svd_values(&qm).unwrap();
        for v in s.values() {
            assert!((v - 1.0).abs() <= 1e-8, "singular value {v}");
        }
    }

    #[test]
    fn finite_diff_on_quadratic_and_constant() {
        let w = random_matrix(4, 3, 5);
        let grad = finite_diff_grad(|m| frobenius_norm(m).powi(2), &w, DEFAULT_FD_EPS).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let expect = 2.0 * w.get(i, j);
                let got = grad.get(i, j);
                assert!(
                    (got - expect).abs() <= 1e-6 * expect.abs().max(1.0),
                    "{got} vs {expect}"
                );
            }
        }
        let gz = finite_diff_grad(|_| 1.5, &w, DEFAULT_FD_EPS).unwrap();
        assert!(gz.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn finite_diff_rejects_non_finite_objective() {
        let w = Matrix::identity(2);
        let err = finite_diff_grad(|_| f64::NAN, &w, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFiniteEval));
    }

    #[test]
    fn top_mass_monotone_and_complete() {
        let m = random_matrix(6, 4, 11);
        let s = svd_values(&m).unwrap();
        let mut last = 0.0;
        for j in 1..=s.len() {
            let v = s.top_mass(j);
            assert!(v >= last);
            last = v;
        }
        assert!((s.top_mass(s.len()) - 1.0).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_matrix() -> impl Strategy<Value = Matrix> {
            ((1usize..7, 1usize..7), any::<u64>()).prop_map(|((r, c), seed)| {
                let mut rng = crate::rng::Rng::from_seed(seed);
                Matrix::new(r, c, (0..r * c).map(|_| 3.0 * rng.normal()).collect())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn spectrum_mass_matches_frobenius(m in arb_matrix()) {
                let s = svd_values(&m).unwrap();
                let f2 = frobenius_norm(&m).powi(2);
                let s2: f64 = s.values().iter().map(|v| v * v).sum();
                prop_assert!((s2 - f2).abs() <= 1e-10 * f2.max(1.0));
            }

            #[test]
            fn spectrum_invariant_under_transpose_and_row_swap(m in arb_matrix()) {
                let a = svd_values(&m).unwrap();
                let b = svd_values(&m.transposed()).unwrap();
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() <= 1e-10 * x.max(1.0));
                }
                if m.rows() >= 2 {
                    let mut swapped = m.clone();
                    let top: Vec<f64> = swapped.row(0).to_vec();
                    let bottom: Vec<f64> = swapped.row(m.rows() - 1).to_vec();
                    swapped.row_mut(0).copy_from_slice(&bottom);
                    let last = m.rows() - 1;
                    swapped.row_mut(last).copy_from_slice(&top);
                    let c = svd_values(&swapped).unwrap();
                    for (x, y) in a.values().iter().zip(c.values()) {
                        prop_assert!((x - y).abs() <= 1e-10 * x.max(1.0));
                    }
                }
            }
        }
    }
}
