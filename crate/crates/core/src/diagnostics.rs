//! Post-fit diagnostics: chi QQ data, influence function, asymptotic
//! covariance and the breakdown bound.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::calibration::{expected_psi_sq, expected_w_star};
use crate::distributions::chisq_quantile;
use crate::error::{MmError, Result};
use crate::mm::FitResult;
use crate::model::{CoefMatrix, Dataset, Scatter};
use crate::rho::{BoundedRho, RhoKernel};

pub const DEFAULT_FLAG_LEVEL: f64 = 0.999;
pub const HYPERPLANE_LIMIT: usize = 60;
pub const HYPERPLANE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QQData {
    pub sorted_norms: Vec<f64>,
    pub theoretical: Vec<f64>,
    /// Original observation indices whose norm exceeds the flag threshold.
    pub flagged: Vec<usize>,
    pub threshold: f64,
}

impl QQData {
    /// Columns `theoretical,observed,flagged`, in sorted order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| MmError::Contract(format!("csv output failed: {e}"));
        w.write_record(["theoretical", "observed", "flagged"]).map_err(io)?;
        for (t, s) in self.theoretical.iter().zip(&self.sorted_norms) {
            let flag = if *s > self.threshold { "1" } else { "0" };
            w.write_record([format!("{t}"), format!("{s}"), flag.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| MmError::Contract(format!("csv output failed: {e}")))?;
        Ok(())
    }
}

/// Mahalanobis norms of the fit against root chi-squared quantiles.
pub fn qq_data(fit: &FitResult, q: usize, flag_level: f64) -> Result<QQData> {
    if q == 0 || fit.distances.is_empty() {
        return Err(MmError::Contract("qq data needs q >= 1 and at least one distance".into()));
    }
    if !(flag_level > 0.0 && flag_level < 1.0) {
        return Err(MmError::Contract(format!("flag level must lie in (0, 1), got {flag_level}")));
    }
    let n = fit.distances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fit.distances[a].total_cmp(&fit.distances[b]).then(a.cmp(&b)));
    let sorted_norms: Vec<f64> = order.iter().map(|&i| fit.distances[i]).collect();
    let theoretical = (1..=n).map(|i| chisq_quantile((i as f64 - 0.5) / n as f64, q).sqrt()).collect();
    let threshold = chisq_quantile(flag_level, q).sqrt();
    let mut flagged: Vec<usize> = order.iter().copied().filter(|&i| fit.distances[i] > threshold).collect();
    flagged.sort_unstable();
    Ok(QQData { sorted_norms, theoretical, flagged, threshold })
}

/// Influence of a point `(y0, x0)` on the MM coefficient functional, as a
/// p x q matrix:
/// `W(t) E(xx')^-1 x0 (y0 - B0'x0)' / E W*(V / sigma0)`,
/// with `t = d(y0 - B0'x0, Sigma0) / sigma0` and `V ~ chi_q`.
pub fn influence_value(
    y0: &DVector<f64>,
    x0: &DVector<f64>,
    b0: &CoefMatrix,
    sigma0_mat: &Scatter,
    sigma0: f64,
    xx_inv: &DMatrix<f64>,
    k1: &RhoKernel,
) -> Result<DMatrix<f64>> {
    let (p, q) = (b0.matrix().nrows(), b0.matrix().ncols());
    if y0.len() != q || x0.len() != p || xx_inv.shape() != (p, p) || sigma0_mat.dim() != q {
        return Err(MmError::Contract("influence_value dimension mismatch".into()));
    }
    if !(sigma0 > 0.0) {
        return Err(MmError::Contract(format!("sigma0 must be positive, got {sigma0}")));
    }
    let u = y0 - b0.matrix().transpose() * x0;
    let um = DMatrix::from_column_slice(q, 1, u.as_slice());
    let d = sigma0_mat.solve(&um).dot(&um).max(0.0).sqrt();
    let w = k1.weight(d / sigma0);
    if w == 0.0 {
        return Ok(DMatrix::zeros(p, q));
    }
    // W_c(v / s) = s^2 W_{cs}(v), and the same for W*.
    let ew = sigma0 * sigma0 * expected_w_star(k1.c * sigma0, q);
    if ew == 0.0 {
        return Err(MmError::DegenerateKernel("E W* vanishes".into()));
    }
    Ok(xx_inv * x0 * u.transpose() * (w / ew))
}

#[derive(Debug, Clone)]
pub struct AsymptoticCov {
    /// pq x pq, indexed by `j * q + l` for coefficient `B[j, l]`.
    pub v: DMatrix<f64>,
    pub scalar_factor: f64,
}

/// `V = (1/q) E psi1^2 / (E W*)^2 (X'X/n)^-1 kron Sigma_hat`, with the radial
/// expectations under the Gaussian working model.
pub fn asymptotic_covariance(data: &Dataset, fit: &FitResult, k1: &RhoKernel) -> Result<AsymptoticCov> {
    if !(fit.scale > 0.0) || fit.exact_fit {
        return Err(MmError::Contract("asymptotic covariance needs a fit with positive scale".into()));
    }
    let q = data.q();
    let ew = expected_w_star(k1.c, q);
    if ew == 0.0 {
        return Err(MmError::DegenerateKernel(format!("E W* vanishes for c1 = {}, q = {q}", k1.c)));
    }
    let scalar_factor = expected_psi_sq(k1.c, q) / (q as f64 * ew * ew);
    let xx = data.x().transpose() * data.x() / data.n() as f64;
    let xx_inv = Scatter::new(xx)?.solve(&DMatrix::identity(data.p(), data.p()));
    let xx_inv = (&xx_inv + xx_inv.transpose()) * 0.5;
    Ok(AsymptoticCov { v: xx_inv.kronecker(&fit.scatter) * scalar_factor, scalar_factor })
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > HYPERPLANE_TOL * top).count()
}

/// Unit normal of the hyperplane through the origin spanned by `rows`, or
/// `None` when the rows do not span a hyperplane.
fn hyperplane_normal(z: &DMatrix<f64>, rows: &[usize]) -> Option<DVector<f64>> {
    let k = z.ncols();
    let mut sub = DMatrix::zeros(k, k);
    for (r, &i) in rows.iter().enumerate() {
        sub.set_row(r, &z.row(i));
    }
    let svd = sub.svd(false, true);
    let sv = &svd.singular_values;
    let top = sv.max();
    if top == 0.0 {
        return None;
    }
    let (smallest, _) = sv.argmin();
    if sv.iter().filter(|&&s| s > HYPERPLANE_TOL * top).count() != k - 1 {
        return None;
    }
    let vt = svd.v_t.expect("requested");
    Some(vt.row(smallest).transpose().normalize())
}

fn incidences(z: &DMatrix<f64>, normal: &DVector<f64>) -> usize {
    (0..z.nrows()).filter(|&i| (z.row(i) * normal)[0].abs() <= HYPERPLANE_TOL).count()
}

fn stacked(data: &Dataset) -> DMatrix<f64> {
    let (n, p, q) = (data.n(), data.p(), data.q());
    let mut z = DMatrix::zeros(n, p + q);
    z.columns_mut(0, q).copy_from(data.y());
    z.columns_mut(q, p).copy_from(data.x());
    z
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Largest number of points `z_i = (y_i', x_i')` on one hyperplane through
/// the origin, by enumerating the hyperplanes spanned by `p + q - 1` points.
pub fn hyperplane_max_count(data: &Dataset, limit: usize) -> Result<usize> {
    let n = data.n();
    if n > limit {
        return Err(MmError::TooLarge { n, limit });
    }
    let z = stacked(data);
    let k = z.ncols();
    if numerical_rank(&z) < k {
        return Ok(n);
    }
    let mut idx: Vec<usize> = (0..k - 1).collect();
    let mut best = k - 1;
    loop {
        if let Some(normal) = hyperplane_normal(&z, &idx) {
            best = best.max(incidences(&z, &normal));
        }
        if !next_combination(&mut idx, n) {
            break;
        }
    }
    Ok(best)
}

/// `min(eps_initial, (floor(n/2) - k_n) / n)`.
pub fn breakdown_lower_bound(n: usize, k_n: usize, eps_initial: f64) -> Result<f64> {
    if n == 0 || 2 * k_n >= n {
        return Err(MmError::Contract(format!("need k_n < n/2, got n = {n}, k_n = {k_n}")));
    }
    Ok(eps_initial.min((n / 2 - k_n) as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::are;
    use crate::mm::{mle_fit, MMConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn fit_with_distances(d: Vec<f64>) -> FitResult {
        let n = d.len();
        let data =
            Dataset::new(DMatrix::from_fn(n, 1, |i, _| 1.0 + i as f64), DMatrix::from_fn(n, 1, |i, _| (i * i) as f64))
                .unwrap();
        let mut fit = mle_fit(&data).unwrap();
        fit.distances = d;
        fit
    }

    #[test]
    fn qq_median_is_closed_form() {
        let fit = fit_with_distances(vec![0.3, 2.0, 1.0, 0.1, 5.0]);
        let qq = qq_data(&fit, 2, DEFAULT_FLAG_LEVEL).unwrap();
        assert!((qq.theoretical[2] - (2.0 * 2f64.ln()).sqrt()).abs() < 1e-9);
        assert!((qq.theoretical[2] - 1.17741).abs() < 1e-5);
        assert_eq!(qq.sorted_norms, vec![0.1, 0.3, 1.0, 2.0, 5.0]);
        // sqrt(-2 ln 0.001) = 3.717
        assert_eq!(qq.flagged, vec![4]);
        assert!(qq.theoretical.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn qq_exact_fit_and_sorted_input() {
        let qq = qq_data(&fit_with_distances(vec![0.0; 4]), 3, 0.999).unwrap();
        assert!(qq.sorted_norms.iter().all(|&v| v == 0.0));
        assert!(qq.flagged.is_empty());
        let sorted = vec![0.1, 0.2, 0.7, 1.5];
        let qq = qq_data(&fit_with_distances(sorted.clone()), 1, 0.999).unwrap();
        assert_eq!(qq.sorted_norms, sorted);
    }

    #[test]
    fn qq_quantiles_match_monte_carlo() {
        let q = 3;
        let n_draws = 1_000_000;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let mut draws: Vec<f64> = (0..n_draws)
            .map(|_| (0..q).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum::<f64>().sqrt())
            .collect();
        draws.sort_by(f64::total_cmp);
        for prob in [0.5, 0.9] {
            let theory = chisq_quantile(prob, q).sqrt();
            let empirical = draws[(prob * n_draws as f64) as usize];
            // standard error of a sample quantile: sqrt(p(1-p)/N) / f(x)
            let se = (prob * (1.0 - prob) / n_draws as f64).sqrt() / crate::distributions::chi_pdf(theory, q);
            assert!((empirical - theory).abs() < 3.0 * se, "p={prob}");
        }
    }

    #[test]
    fn qq_csv_has_header_and_rows() {
        let qq = qq_data(&fit_with_distances(vec![0.5, 4.0]), 2, 0.999).unwrap();
        let mut buf = Vec::new();
        qq.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "theoretical,observed,flagged");
        assert!(lines[2].ends_with(",4,1"));
    }

    fn standard_if_inputs() -> (CoefMatrix, Scatter, DMatrix<f64>, RhoKernel) {
        let b0 = CoefMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -1.0, 2.0])).unwrap();
        (b0, Scatter::identity(2), DMatrix::identity(2, 2), RhoKernel::bisquare(4.28))
    }

    #[test]
    fn influence_zero_at_zero_residual_and_saturation() {
        let (b0, s0, xx_inv, k1) = standard_if_inputs();
        let x0 = DVector::from_vec(vec![0.7, -1.2]);
        let fitted = b0.matrix().transpose() * &x0;
        let v = influence_value(&fitted, &x0, &b0, &s0, 1.0, &xx_inv, &k1).unwrap();
        assert!(v.iter().all(|&e| e == 0.0));
        for r in [4.28 * (1.0 + 1e-12), 4.5, 10.0, 1e6] {
            for angle in [0.0, 1.0, 2.5] {
                let dir = DVector::from_vec(vec![f64::cos(angle), f64::sin(angle)]);
                let y0 = &fitted + dir * r;
                let v = influence_value(&y0, &x0, &b0, &s0, 1.0, &xx_inv, &k1).unwrap();
                assert!(v.iter().all(|&e| e == 0.0), "r = {r}");
            }
        }
    }

    #[test]
    fn influence_is_linear_in_x_at_fixed_residual() {
        let (b0, s0, xx_inv, k1) = standard_if_inputs();
        let x0 = DVector::from_vec(vec![0.7, -1.2]);
        let u = DVector::from_vec(vec![0.4, 1.1]);
        let y1 = b0.matrix().transpose() * &x0 + &u;
        let x2 = &x0 * 2.0;
        let y2 = b0.matrix().transpose() * &x2 + &u;
        let v1 = influence_value(&y1, &x0, &b0, &s0, 1.0, &xx_inv, &k1).unwrap();
        let v2 = influence_value(&y2, &x2, &b0, &s0, 1.0, &xx_inv, &k1).unwrap();
        assert!((v2 - v1 * 2.0).amax() < 1e-14);
    }

    #[test]
    fn influence_second_moment_matches_asymptotic_covariance() {
        // E[vec(IF) vec(IF)'] = V under the Gaussian model
        let q = 2;
        let c1 = 4.2821016366;
        let k1 = RhoKernel::bisquare(c1);
        let b0 = CoefMatrix::zeros(1, q);
        let s0 = Scatter::identity(q);
        let xx_inv = DMatrix::identity(1, 1);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let reps = 200_000;
        let mut acc = DMatrix::zeros(q, q);
        for _ in 0..reps {
            let x0 = DVector::from_element(1, rng.sample::<f64, _>(StandardNormal));
            let y0 = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = influence_value(&y0, &x0, &b0, &s0, 1.0, &xx_inv, &k1).unwrap();
            let r = v.row(0).transpose();
            acc += &r * r.transpose();
        }
        acc /= reps as f64;
        let target = 1.0 / are(c1, q).unwrap();
        assert!((acc[(0, 0)] - target).abs() < 0.02 * target);
        assert!((acc[(1, 1)] - target).abs() < 0.02 * target);
        assert!(acc[(0, 1)].abs() < 0.02);
    }

    #[test]
    fn asymptotic_covariance_structure() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
        let data = Dataset::new(
            DMatrix::from_fn(80, 2, |_, _| rng.sample::<f64, _>(StandardNormal)),
            DMatrix::from_fn(80, 2, |_, _| rng.sample::<f64, _>(StandardNormal)),
        )
        .unwrap();
        let cfg = MMConfig::calibrated(2, 0.5, 0.90).unwrap();
        let mut fit = mle_fit(&data).unwrap();
        let k1 = cfg.loss_kernel();
        let ac = asymptotic_covariance(&data, &fit, &k1).unwrap();
        assert!((ac.scalar_factor - 1.0 / 0.90).abs() < 1e-8);
        let xx = data.x().transpose() * data.x() / 80.0;
        let xx_inv = xx.try_inverse().unwrap();
        for j in 0..2 {
            for k in 0..2 {
                let block = ac.v.view((2 * j, 2 * k), (2, 2));
                let want = &fit.scatter * (xx_inv[(j, k)] * ac.scalar_factor);
                assert!((block - want).amax() < 1e-8);
            }
        }
        assert!((&ac.v - ac.v.transpose()).amax() < 1e-12);
        assert!(ac.v.clone().symmetric_eigenvalues().min() > 0.0);
        let v1 = ac.v.clone();
        fit.scatter *= 2.0;
        let ac2 = asymptotic_covariance(&data, &fit, &k1).unwrap();
        assert!((ac2.v - v1 * 2.0).amax() < 1e-12);
    }

    #[test]
    fn hyperplane_examples() {
        let pts = Dataset::from_rows(
            &[vec![1.0], vec![2.0], vec![3.0], vec![1.0]],
            &[vec![1.0], vec![2.0], vec![3.0], vec![0.0]],
        );
        assert_eq!(hyperplane_max_count(&pts.unwrap(), 60).unwrap(), 3);

        let same = Dataset::from_rows(&vec![vec![1.0, 2.0]; 6], &vec![vec![3.0]; 6]).unwrap();
        assert_eq!(hyperplane_max_count(&same, 60).unwrap(), 6);

        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let data = Dataset::new(
            DMatrix::from_fn(15, 2, |_, _| rng.sample::<f64, _>(StandardNormal)),
            DMatrix::from_fn(15, 2, |_, _| rng.sample::<f64, _>(StandardNormal)),
        )
        .unwrap();
        assert_eq!(hyperplane_max_count(&data, 60).unwrap(), 3);

        let big = Dataset::new(DMatrix::from_element(61, 1, 1.0), DMatrix::from_fn(61, 1, |i, _| i as f64)).unwrap();
        assert!(matches!(hyperplane_max_count(&big, 60), Err(MmError::TooLarge { n: 61, limit: 60 })));
    }

    #[test]
    fn breakdown_examples() {
        assert!((breakdown_lower_bound(100, 3, 0.5).unwrap() - 0.47).abs() < 1e-15);
        assert_eq!(breakdown_lower_bound(100, 3, 0.0).unwrap(), 0.0);
        assert!((breakdown_lower_bound(100, 49, 0.5).unwrap() - 0.01).abs() < 1e-15);
        assert!(breakdown_lower_bound(100, 50, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn combinations_enumerate_binomial(n in 1usize..9, k in 1usize..5) {
            prop_assume!(k <= n);
            let mut idx: Vec<usize> = (0..k).collect();
            let mut count = 1u64;
            while next_combination(&mut idx, n) {
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                count += 1;
            }
            let binom = (0..k as u64).fold(1u64, |acc, i| acc * (n as u64 - i) / (i + 1));
            prop_assert_eq!(count, binom);
        }
    }
}
