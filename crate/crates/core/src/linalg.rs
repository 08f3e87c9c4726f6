//! Dense symmetric kernels: eigendecomposition, jittered Cholesky and PSD
//! projection. Factorisations are delegated to `nalgebra`; this module owns
//! the ordering, sign and jitter conventions the rest of the crate relies on.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute asymmetry accepted at construction, scaled by `max(1, max|a_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A dense symmetric matrix. Symmetrised as `(A + Aᵀ)/2` on ingest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidArgument(format!(
                "matrix is {}x{}, expected square",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let scale = a.amax().max(1.0);
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in (j + 1)..n {
                worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
            }
        }
        if worst.is_nan() || worst > SYMMETRY_TOL * scale {
            return Err(Error::InvalidArgument(format!(
                "matrix is not symmetric (max asymmetry {worst:e})"
            )));
        }
        Ok(Self::symmetrized(a))
    }

    /// Build from the lower triangle of `f(i, j)` (`i >= j`), mirrored, so the
    /// result is exactly symmetric.
    pub fn from_lower_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = f(i, j);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        SymMatrix(a)
    }

    fn symmetrized(mut a: DMatrix<f64>) -> Self {
        let n = a.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (a[(i, j)] + a[(j, i)]);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        SymMatrix(a)
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    /// `v vᵀ`.
    pub fn outer(v: &[f64]) -> Self {
        Self::from_lower_fn(v.len(), |i, j| v[i] * v[j])
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Set `(i, j)` and `(j, i)` together.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0[(i, j)] = v;
        self.0[(j, i)] = v;
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.check_dim(other)?;
        Ok(SymMatrix(&self.0 + &other.0))
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.check_dim(other)?;
        Ok(SymMatrix(&self.0 - &other.0))
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    /// Principal submatrix on `idx`.
    pub fn select(&self, idx: &[usize]) -> SymMatrix {
        Self::from_lower_fn(idx.len(), |a, b| self.0[(idx[a], idx[b])])
    }

    fn check_dim(&self, other: &SymMatrix) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors
/// stored as columns.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPairs {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j).iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&self.values));
        &self.vectors * d * self.vectors.transpose()
    }

    /// Largest |λ|, used to scale rank and positivity thresholds.
    pub fn scale(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Number of eigenvalues above `rel_tol * scale`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let cut = rel_tol * self.scale();
        self.values.iter().filter(|&&v| v > cut).count()
    }
}

/// Full symmetric eigendecomposition, descending, with each eigenvector
/// oriented so its largest-magnitude component (first on ties) is positive.
pub fn sym_eigen(a: &SymMatrix) -> Result<EigenPairs> {
    let n = a.dim();
    if n == 0 {
        return Ok(EigenPairs {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    if a.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigendecomposition of non-finite matrix".into()));
    }
    let max_iter = 100 * n.max(10);
    let eig = SymmetricEigen::try_new(a.0.clone(), f64::EPSILON, max_iter).ok_or_else(|| {
        Error::Numerical(format!(
            "symmetric eigensolver did not converge within {max_iter} sweeps (n = {n}, ‖A‖_F = {:e})",
            a.frobenius()
        ))
    })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, dst)] = sign * col[i];
        }
    }
    Ok(EigenPairs { values, vectors })
}

/// Diagonal jitter ladder: try `A`, then `A + εI` for `ε = initial, 2·initial,
/// …` up to `max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial: f64,
    pub max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial: 1e-10,
            max: 1e-6,
        }
    }
}

/// Lower-triangular factor and the jitter that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl CholeskyFactor {
    /// Solve `(A + εI) x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a nonzero diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a nonzero diagonal")
    }

    /// `(A + εI)⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let linv = self
            .l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("cholesky factor has a nonzero diagonal");
        linv.transpose() * linv
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

pub fn cholesky(a: &SymMatrix, policy: JitterPolicy) -> Result<CholeskyFactor> {
    let n = a.dim();
    let mut jitter = 0.0;
    loop {
        let mut m = a.0.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::Cholesky::new(m) {
            return Ok(CholeskyFactor {
                l: c.unpack(),
                jitter,
            });
        }
        jitter = if jitter == 0.0 { policy.initial } else { jitter * 2.0 };
        if jitter > policy.max {
            return Err(Error::Numerical(format!(
                "cholesky failed with jitter up to {:e} (n = {n})",
                policy.max
            )));
        }
    }
}

/// Clip negative eigenvalues to zero and reconstruct.
pub fn psd_project(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eigen(a)?;
    let n = a.dim();
    let mut scaled = eig.vectors.clone();
    for (j, &lam) in eig.values.iter().enumerate() {
        let s = lam.max(0.0);
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    Ok(SymMatrix::symmetrized(scaled * eig.vectors.transpose()))
}

/// Leading eigenpair of a PSD matrix by power iteration from a fixed start.
/// Returns `(λ, v)` with `v` oriented like [`sym_eigen`].
pub fn top_eigenpair_psd(a: &SymMatrix, max_iter: usize, tol: f64) -> (f64, Vec<f64>) {
    let n = a.dim();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = &a.0 * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return (0.0, v.iter().copied().collect());
        }
        let next = w / norm;
        let diff = (&next - &v).norm();
        v = next;
        lambda = norm;
        if diff < tol {
            break;
        }
    }
    let mut pivot = 0;
    for i in 1..n {
        if v[i].abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        v = -v;
    }
    (lambda, v.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sym(rows: &[&[f64]]) -> SymMatrix {
        let n = rows.len();
        SymMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j])).unwrap()
    }

    fn random_sym(n: usize, seed: u64) -> SymMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::new((&m + m.transpose()) * 0.5).unwrap()
    }

    #[test]
    fn rejects_asymmetric_and_non_square() {
        assert!(SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).is_err());
        assert!(SymMatrix::new(DMatrix::zeros(2, 3)).is_err());
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-12, 4.0]);
        let s = SymMatrix::new(tiny).unwrap();
        assert_eq!(s.get(0, 1), s.get(1, 0));
    }

    #[test]
    fn eigen_of_diagonal() {
        let e = sym_eigen(&SymMatrix::from_diagonal(&[2.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 1.0]);
        assert_abs_diff_eq!(e.vector(0)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.vector(1)[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eigen_of_swap_matrix() {
        let e = sym_eigen(&sym(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_abs_diff_eq!(e.values[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn eigen_of_rank_one() {
        let e = sym_eigen(&SymMatrix::outer(&[3.0, 0.0, 4.0])).unwrap();
        assert_abs_diff_eq!(e.values[0], 25.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e.values[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e.values[2], 0.0, epsilon = 1e-10);
        let v = e.vector(0);
        // sign convention makes the largest component positive
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-10);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(v[2], 0.8, epsilon = 1e-10);
    }

    #[test]
    fn eigen_residuals_and_orthonormality_at_moderate_size() {
        let a = random_sym(120, 3);
        let e = sym_eigen(&a).unwrap();
        let fro = a.frobenius();
        for j in 0..e.len() {
            let v = DVector::from_vec(e.vector(j));
            let r = (a.as_matrix() * &v - &v * e.values[j]).norm();
            assert!(r <= 1e-8 * (1.0 + e.values[j].abs()) * fro.max(1.0), "pair {j}: {r}");
        }
        let vtv = e.vectors.transpose() * &e.vectors;
        assert!((vtv - DMatrix::identity(120, 120)).amax() < 1e-8);
        let rec = e.reconstruct();
        assert!((rec - a.as_matrix()).norm() / fro < 1e-7);
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn cholesky_examples() {
        let c = cholesky(&SymMatrix::identity(3), JitterPolicy::default()).unwrap();
        assert_eq!(c.l, DMatrix::identity(3, 3));
        assert_eq!(c.jitter, 0.0);

        let c = cholesky(&sym(&[&[4.0, 2.0], &[2.0, 5.0]]), JitterPolicy::default()).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]);
        assert!((&c.l - want).amax() < 1e-14);

        let a = sym(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let c = cholesky(&a, JitterPolicy::default()).unwrap();
        assert!(c.jitter > 0.0 && c.jitter <= 1e-6);
        let back = &c.l * c.l.transpose();
        assert!((back - a.as_matrix()).amax() < 1e-6);
    }

    #[test]
    fn cholesky_fails_on_indefinite() {
        let a = sym(&[&[1.0, 0.0], &[0.0, -1.0]]);
        assert!(matches!(
            cholesky(&a, JitterPolicy::default()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn cholesky_solve_and_inverse() {
        let a = sym(&[&[4.0, 2.0], &[2.0, 5.0]]);
        let c = cholesky(&a, JitterPolicy::default()).unwrap();
        let x = c.solve(&DVector::from_vec(vec![2.0, 1.0]));
        let back = a.as_matrix() * &x;
        assert_abs_diff_eq!(back[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], 1.0, epsilon = 1e-12);
        let inv = c.inverse();
        assert!((a.as_matrix() * inv - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert_abs_diff_eq!(c.log_det(), 16f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn psd_projection_examples() {
        let p = psd_project(&SymMatrix::from_diagonal(&[1.0, -2.0])).unwrap();
        assert!((p.as_matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).amax() < 1e-12);

        let a = SymMatrix::outer(&[1.0, 2.0, -1.0])
            .add(&SymMatrix::from_diagonal(&[0.5, 0.1, 0.2]))
            .unwrap();
        let p = psd_project(&a).unwrap();
        assert!((p.as_matrix() - a.as_matrix()).amax() < 1e-8);

        let b = random_sym(30, 11);
        let want: f64 = sym_eigen(&b).unwrap().values.iter().map(|v| v.max(0.0)).sum();
        let p = psd_project(&b).unwrap();
        assert_abs_diff_eq!(p.trace(), want, epsilon = 1e-9);
        let pp = psd_project(&p).unwrap();
        assert!((pp.as_matrix() - p.as_matrix()).amax() < 1e-8);
    }

    #[test]
    fn power_iteration_matches_full_solver() {
        let a = SymMatrix::outer(&[0.3, -1.2, 0.5, 0.9])
            .add(&SymMatrix::from_diagonal(&[0.01, 0.02, 0.0, 0.01]))
            .unwrap();
        let (lam, v) = top_eigenpair_psd(&a, 2000, 1e-14);
        let e = sym_eigen(&a).unwrap();
        assert_abs_diff_eq!(lam, e.values[0], epsilon = 1e-9);
        for (x, y) in v.iter().zip(e.vector(0)) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn trace_equals_eigen_sum(n in 1usize..25, seed in any::<u64>()) {
            let a = random_sym(n, seed);
            let e = sym_eigen(&a).unwrap();
            let s: f64 = e.values.iter().sum();
            prop_assert!((s - a.trace()).abs() <= 1e-8 * n as f64);
        }

        #[test]
        fn eigenvector_sign_convention(n in 2usize..12, seed in any::<u64>()) {
            let e = sym_eigen(&random_sym(n, seed)).unwrap();
            for j in 0..n {
                let v = e.vector(j);
                let mut p = 0;
                for i in 1..n { if v[i].abs() > v[p].abs() { p = i; } }
                prop_assert!(v[p] > 0.0);
            }
        }
    }
}
