//! Data model and the dense linear algebra shared by every estimator.
//!
//! All matrices are `nalgebra::DMatrix<f64>`, which stores entries in
//! column-major order. Observations are rows: `X` is n×p, `Y` is n×q, and
//! the coefficient matrix `B` is p×q so that fitted responses are `X B`.
//!
//! Every solve goes through a Cholesky factorization. A symmetric matrix is
//! treated as numerically singular when its smallest eigenvalue is at most
//! `1e-12` times its largest.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MmError, Result};

/// Relative eigenvalue floor below which a symmetric matrix counts as singular.
pub const SINGULAR_RATIO: f64 = 1e-12;

/// Observations of (response in R^q, predictor in R^p), stored as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Dataset {
    /// Builds a dataset from an n×p predictor matrix and an n×q response matrix.
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(MmError::Contract(format!(
                "predictor rows ({}) differ from response rows ({})",
                x.nrows(),
                y.nrows()
            )));
        }
        let (n, p, q) = (x.nrows(), x.ncols(), y.ncols());
        if p == 0 || q == 0 {
            return Err(MmError::Contract("need at least one predictor and one response".into()));
        }
        if n < p + q {
            return Err(MmError::Contract(format!("n = {n} is smaller than p + q = {}", p + q)));
        }
        for (name, m) in [("X", &x), ("Y", &y)] {
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                let (row, col) = (pos % n, pos / n);
                return Err(MmError::Contract(format!("non-finite value in {name}[{row}, {col}]")));
            }
        }
        Ok(Self { x, y })
    }

    /// Row-major convenience constructor.
    pub fn from_rows(x_rows: &[Vec<f64>], y_rows: &[Vec<f64>]) -> Result<Self> {
        let to_matrix = |rows: &[Vec<f64>], what: &str| -> Result<DMatrix<f64>> {
            let ncols = rows.first().map(Vec::len).unwrap_or(0);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(MmError::Contract(format!("ragged {what} rows")));
            }
            Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
        };
        Self::new(to_matrix(x_rows, "predictor")?, to_matrix(y_rows, "response")?)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    /// Restricts to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(self.x.select_rows(rows), self.y.select_rows(rows))
    }

    /// Applies `Y -> (Y + X D) A c`, the transformation under which the
    /// estimators are equivariant.
    pub fn transform_responses(&self, shift: &DMatrix<f64>, a: &DMatrix<f64>, c: f64) -> Result<Self> {
        let y = (&self.y + &self.x * shift) * a * c;
        Self::new(self.x.clone(), y)
    }
}

/// A p×q coefficient matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefMatrix(DMatrix<f64>);

impl CoefMatrix {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if b.iter().any(|v| !v.is_finite()) {
            return Err(MmError::Contract("coefficient matrix has non-finite entries".into()));
        }
        Ok(Self(b))
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self(DMatrix::zeros(p, q))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Spectral norm.
    pub fn norm2(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.singular_values().max()
    }

    /// Sum of squared entries.
    pub fn squared_frobenius(&self) -> f64 {
        self.0.norm_squared()
    }
}

/// A symmetric positive definite q×q matrix with its Cholesky factor and
/// determinant cached.
#[derive(Debug, Clone)]
pub struct Scatter {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    det: f64,
}

impl PartialEq for Scatter {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

impl Scatter {
    /// Validates symmetry (relative 1e-12) and positive definiteness.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.is_empty() {
            return Err(MmError::Contract(format!(
                "scatter must be square and nonempty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(MmError::Contract("scatter has non-finite entries".into()));
        }
        let scale = matrix.amax();
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(MmError::Contract(format!("scatter is not symmetric (asymmetry {asym:e})")));
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        check_well_conditioned(&matrix)?;
        let chol = Cholesky::new(matrix.clone()).ok_or(MmError::SingularScatter { min_eig: 0.0, max_eig: scale })?;
        let det = chol.l_dirty().diagonal().iter().map(|d| d * d).product();
        Ok(Self { matrix, chol, det })
    }

    pub fn identity(q: usize) -> Self {
        Self::new(DMatrix::identity(q, q)).expect("identity is positive definite")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    /// Lower-triangular Cholesky factor `L` with `S = L L'`.
    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `c * S` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(MmError::Contract(format!("scatter scale factor must be positive, got {c}")));
        }
        Self::new(&self.matrix * c)
    }

    /// Solves `S z = b` through the cached factorization.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.matrix.symmetric_eigenvalues()
    }
}

/// Rejects symmetric matrices whose eigenvalue ratio falls below [`SINGULAR_RATIO`].
fn check_well_conditioned(m: &DMatrix<f64>) -> Result<()> {
    let eig = m.symmetric_eigenvalues();
    let max_eig = eig.max();
    let min_eig = eig.min();
    if !(max_eig > 0.0) || min_eig <= SINGULAR_RATIO * max_eig {
        return Err(MmError::SingularScatter { min_eig, max_eig });
    }
    Ok(())
}

/// Residual matrix `Y - X B`; row i is `y_i - B' x_i`.
pub fn residuals(data: &Dataset, b: &CoefMatrix) -> Result<DMatrix<f64>> {
    let bm = b.matrix();
    if bm.nrows() != data.p() || bm.ncols() != data.q() {
        return Err(MmError::Contract(format!(
            "coefficient matrix is {}x{}, data needs {}x{}",
            bm.nrows(),
            bm.ncols(),
            data.p(),
            data.q()
        )));
    }
    Ok(data.y() - data.x() * bm)
}

/// Residuals below this, relative to `1 + max |y_ij|`, count as exact zeros.
pub const EXACT_FIT_TOL: f64 = 1e-10;

/// Which rows `B` fits exactly, up to [`EXACT_FIT_TOL`].
pub fn exactly_fitted_rows(data: &Dataset, b: &CoefMatrix) -> Result<Vec<bool>> {
    let tol = EXACT_FIT_TOL * (1.0 + data.y().amax());
    Ok(residuals(data, b)?.row_iter().map(|r| r.amax() <= tol).collect())
}

/// Mahalanobis norms `sqrt(u_i' S^-1 u_i)` of the rows of `u`.
pub fn mahalanobis_norms(u: &DMatrix<f64>, s: &Scatter) -> Result<Vec<f64>> {
    if u.ncols() != s.dim() {
        return Err(MmError::Contract(format!(
            "residuals have {} columns but scatter is {}x{}",
            u.ncols(),
            s.dim(),
            s.dim()
        )));
    }
    // z = L^-1 u' so that |z_i|^2 = u_i' S^-1 u_i
    let z = s
        .chol
        .l_dirty()
        .solve_lower_triangular(&u.transpose())
        .ok_or(MmError::SingularScatter { min_eig: 0.0, max_eig: 0.0 })?;
    Ok(z.column_iter().map(|c| c.norm()).collect())
}

/// `S / det(S)^(1/q)`, the unit-determinant shape of `S`.
pub fn det_normalize(s: &Scatter) -> Result<Scatter> {
    let q = s.dim() as f64;
    let factor = s.det().powf(1.0 / q);
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(MmError::SingularScatter { min_eig: 0.0, max_eig: s.matrix.amax() });
    }
    Scatter::new(&s.matrix / factor)
}

/// Normalizes an arbitrary symmetric matrix to unit determinant, validating it on the way.
pub fn shape_of(m: DMatrix<f64>) -> Result<Scatter> {
    det_normalize(&Scatter::new(m)?)
}

/// `sum_i w_i u_i u_i'` over the rows of `u`.
pub fn weighted_cross_product(u: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut uw = u.clone();
    for (mut row, &wi) in uw.row_iter_mut().zip(w) {
        row *= wi;
    }
    let c = u.transpose() * uw;
    (&c + c.transpose()) * 0.5
}

/// Weighted least squares for every column of `y` at once, sharing one factorization.
///
/// Returns the p×q minimizer of `sum_i w_i |y_i - B' x_i|^2`.
pub fn weighted_ls(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &[f64]) -> Result<DMatrix<f64>> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.nrows() != n || w.len() != n {
        return Err(MmError::Contract(format!(
            "weighted LS dimension mismatch: X has {n} rows, y has {}, w has {}",
            y.nrows(),
            w.len()
        )));
    }
    if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(MmError::Contract("weights must be finite and nonnegative".into()));
    }
    let support = w.iter().filter(|&&v| v > 0.0).count();
    if support < p {
        return Err(MmError::RankDeficient { rank: support, expected: p });
    }
    let mut xw = x.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w) {
        row *= wi;
    }
    let gram = x.transpose() * &xw;
    let gram = (&gram + gram.transpose()) * 0.5;
    check_full_rank(&gram)?;
    let rhs = xw.transpose() * y;
    let chol = Cholesky::new(gram).ok_or(MmError::RankDeficient { rank: p - 1, expected: p })?;
    Ok(chol.solve(&rhs))
}

/// Weighted least squares for a single response column.
pub fn weighted_ls_column(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Result<DVector<f64>> {
    let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let beta = weighted_ls(x, &ym, w)?;
    Ok(beta.column(0).into_owned())
}

/// Rank test on the unit-diagonal rescaling of a Gram matrix, so the
/// verdict does not depend on the units of individual predictors.
fn check_full_rank(gram: &DMatrix<f64>) -> Result<()> {
    let p = gram.nrows();
    let diag = gram.diagonal();
    let zero_cols = diag.iter().filter(|&&d| !(d > 0.0)).count();
    if zero_cols > 0 {
        return Err(MmError::RankDeficient { rank: p - zero_cols, expected: p });
    }
    let inv_sqrt = diag.map(|d| 1.0 / d.sqrt());
    let scaled = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let eig = scaled.symmetric_eigenvalues();
    let max_eig = eig.max();
    let rank = eig.iter().filter(|&&e| e > SINGULAR_RATIO * max_eig).count();
    if rank < p {
        return Err(MmError::RankDeficient { rank, expected: p });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn zero_coefficients_give_responses() {
        let data = Dataset::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], &[vec![4.0], vec![5.0], vec![6.0]]).unwrap();
        let r = residuals(&data, &CoefMatrix::zeros(1, 1)).unwrap();
        assert_eq!(&r, data.y());
    }

    #[test]
    fn exact_fit_residuals_vanish() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let x = random_matrix(&mut rng, 10, 3);
        let b = random_matrix(&mut rng, 3, 2);
        let data = Dataset::new(x.clone(), &x * &b).unwrap();
        let r = residuals(&data, &CoefMatrix::new(b).unwrap()).unwrap();
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn hand_residuals() {
        let data = Dataset::from_rows(&[vec![1.0], vec![2.0]], &[vec![3.0], vec![5.0]]).unwrap();
        let r = residuals(&data, &CoefMatrix::new(dmatrix![2.0]).unwrap()).unwrap();
        assert_eq!(r, dmatrix![1.0; 1.0]);
    }

    #[test]
    fn residual_shape_mismatch_is_contract_error() {
        let data = Dataset::from_rows(&[vec![1.0], vec![2.0]], &[vec![3.0], vec![5.0]]).unwrap();
        let err = residuals(&data, &CoefMatrix::zeros(2, 1)).unwrap_err();
        assert!(matches!(err, MmError::Contract(_)));
    }

    #[test]
    fn dataset_rejects_nan_and_small_n() {
        let bad = Dataset::from_rows(&[vec![1.0], vec![f64::NAN]], &[vec![3.0], vec![5.0]]);
        assert!(matches!(bad, Err(MmError::Contract(_))));
        let small = Dataset::from_rows(&[vec![1.0, 2.0]], &[vec![3.0]]);
        assert!(matches!(small, Err(MmError::Contract(_))));
    }

    #[test]
    fn mahalanobis_examples() {
        let id = Scatter::identity(2);
        let d = mahalanobis_norms(&dmatrix![3.0, 4.0; 0.0, 0.0], &id).unwrap();
        assert_relative_eq!(d[0], 5.0, epsilon = 1e-15);
        assert_eq!(d[1], 0.0);
        let s = Scatter::new(dmatrix![4.0, 0.0; 0.0, 1.0]).unwrap();
        let d = mahalanobis_norms(&dmatrix![2.0, 1.0], &s).unwrap();
        assert_relative_eq!(d[0], 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn singular_scatter_rejected() {
        let err = Scatter::new(dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, MmError::SingularScatter { .. }));
        let err = Scatter::new(dmatrix![1.0, 0.0; 0.0, 1e-13]).unwrap_err();
        assert!(matches!(err, MmError::SingularScatter { .. }));
        let err = Scatter::new(dmatrix![1.0, 0.5; 0.4, 1.0]).unwrap_err();
        assert!(matches!(err, MmError::Contract(_)));
    }

    #[test]
    fn det_normalize_examples() {
        let id = det_normalize(&Scatter::identity(3)).unwrap();
        assert_relative_eq!(id.matrix(), &DMatrix::identity(3, 3), epsilon = 1e-15);
        let s = det_normalize(&Scatter::new(dmatrix![4.0, 0.0; 0.0, 1.0]).unwrap()).unwrap();
        assert_relative_eq!(s.matrix(), &dmatrix![2.0, 0.0; 0.0, 0.5], epsilon = 1e-15);
        assert_relative_eq!(s.det(), 1.0, epsilon = 1e-12);
        let s = det_normalize(&Scatter::new(DMatrix::identity(3, 3) * 2.0).unwrap()).unwrap();
        assert_relative_eq!(s.matrix(), &DMatrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn cached_det_matches_lu() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 4, 4);
            let m = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
            let s = Scatter::new(m.clone()).unwrap();
            let lu_det = m.lu().determinant();
            assert!((s.det() - lu_det).abs() <= 1e-10 * lu_det.abs());
        }
    }

    #[test]
    fn wls_examples() {
        let x = dmatrix![1.0; 1.0];
        let y = DVector::from_vec(vec![0.0, 2.0]);
        let b = weighted_ls_column(&x, &y, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(b[0], 1.0, epsilon = 1e-15);
        let b = weighted_ls_column(&x, &y, &[3.0, 1.0]).unwrap();
        assert_relative_eq!(b[0], 0.5, epsilon = 1e-15);

        let x = dmatrix![2.0, 1.0; -1.0, 3.0];
        let beta = DVector::from_vec(vec![0.7, -1.3]);
        let y = &x * &beta;
        let b = weighted_ls_column(&x, &y, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(b, beta, epsilon = 1e-13);
    }

    #[test]
    fn wls_rank_deficiency_names_dimension() {
        let x = dmatrix![1.0, 2.0; 2.0, 4.0; 3.0, 6.0];
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let err = weighted_ls_column(&x, &y, &[1.0, 1.0, 1.0]).unwrap_err();
        assert_eq!(err, MmError::RankDeficient { rank: 1, expected: 2 });
        let x = dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0];
        let err = weighted_ls_column(&x, &y, &[1.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, MmError::RankDeficient { rank: 1, expected: 2 }));
    }

    /// Unweighted normal equations solved by Gaussian elimination on the
    /// explicit Gram matrix, independent of the Cholesky path.
    fn ols_oracle(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let p = x.ncols();
        let mut a = vec![vec![0.0; p + 1]; p];
        for i in 0..p {
            for j in 0..p {
                a[i][j] = (0..x.nrows()).map(|k| x[(k, i)] * x[(k, j)]).sum();
            }
            a[i][p] = (0..x.nrows()).map(|k| x[(k, i)] * y[k]).sum();
        }
        for col in 0..p {
            let piv = (col..p).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..p {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=p {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        DVector::from_fn(p, |i, _| a[i][p] / a[i][i])
    }

    proptest! {
        #[test]
        fn mahalanobis_affine_invariance(seed in any::<u64>()) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let q = rng.gen_range(1..5);
            let g = random_matrix(&mut rng, q, q);
            let s = Scatter::new(&g * g.transpose() + DMatrix::identity(q, q) * 0.2).unwrap();
            let mut a = random_matrix(&mut rng, q, q);
            while a.determinant().abs() < 0.1 {
                a = random_matrix(&mut rng, q, q);
            }
            let u = random_matrix(&mut rng, 6, q);
            let d = mahalanobis_norms(&u, &s).unwrap();
            // rows transform as u_i -> A u_i, i.e. U -> U A'
            let ua = &u * a.transpose();
            let sa = Scatter::new(&a * s.matrix() * a.transpose()).unwrap();
            let da = mahalanobis_norms(&ua, &sa).unwrap();
            for (x, y) in d.iter().zip(&da) {
                prop_assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn det_normalize_scale_free_and_idempotent(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let q = rng.gen_range(1..6);
            let g = random_matrix(&mut rng, q, q);
            let s = Scatter::new(&g * g.transpose() + DMatrix::identity(q, q) * 0.3).unwrap();
            let n1 = det_normalize(&s).unwrap();
            let n2 = det_normalize(&s.scaled(c).unwrap()).unwrap();
            let n3 = det_normalize(&n1).unwrap();
            prop_assert!((n1.matrix() - n2.matrix()).amax() <= 1e-10 * n1.matrix().amax());
            prop_assert!((n1.matrix() - n3.matrix()).amax() <= 1e-10 * n1.matrix().amax());
            prop_assert!((n1.det() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn equal_weights_match_normal_equations(seed in any::<u64>(), w in 0.1f64..10.0) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let p = rng.gen_range(1..5);
            let n = p + rng.gen_range(1..20);
            let x = random_matrix(&mut rng, n, p);
            let y = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            let b = weighted_ls_column(&x, &y, &vec![w; n]).unwrap();
            let oracle = ols_oracle(&x, &y);
            for (u, v) in b.iter().zip(oracle.iter()) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + v.abs()));
            }
        }
    }
}
