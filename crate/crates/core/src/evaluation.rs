//! Monte Carlo simulation under point-mass contamination, and k-fold
//! cross-validation of prediction errors.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{solve_c0, solve_tau_c2};
use crate::error::{MmError, Result};
use crate::initial_s::{s_estimate, SConfig};
use crate::mm::{mle_fit, mm_fit, MMConfig};
use crate::model::{CoefMatrix, Dataset};
use crate::rho::RhoKernel;
use crate::scale::tau_scale;

pub const SCHEMA_VERSION: u32 = 1;
/// Gaussian efficiency of the tau-scale used to score predictions.
pub const TAU_EFFICIENCY: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mle,
    S,
    Mm,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Mle, Estimator::S, Estimator::Mm];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::S => "s",
            Estimator::Mm => "mm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub reps: usize,
    pub contamination_fraction: f64,
    pub x0: f64,
    pub m_grid: Vec<f64>,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    pub target_are: f64,
    pub n_subsamples: usize,
    /// Upper trimming fraction for TMSE.
    pub trim: f64,
}

impl Scenario {
    pub fn default_m_grid() -> Vec<f64> {
        (0..=14).map(|i| 4.0 * i as f64 / 10.0).collect()
    }

    /// Clean Gaussian scenario with the usual defaults.
    pub fn clean(p: usize, q: usize, reps: usize, seed: u64) -> Self {
        Self {
            p,
            q,
            n: 100,
            reps,
            contamination_fraction: 0.0,
            x0: 10.0,
            m_grid: vec![0.0],
            seed,
            estimators: Estimator::ALL.to_vec(),
            target_are: 0.90,
            n_subsamples: 2000,
            trim: 0.10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 || self.reps == 0 {
            return Err(MmError::Contract("p, q and reps must be positive".into()));
        }
        if self.n <= 2 * (self.p + self.q + 1) {
            return Err(MmError::Contract(format!("n = {} too small for p = {}, q = {}", self.n, self.p, self.q)));
        }
        if !(0.0..0.5).contains(&self.contamination_fraction) {
            return Err(MmError::Contract(format!(
                "contamination fraction must lie in [0, 0.5), got {}",
                self.contamination_fraction
            )));
        }
        if self.m_grid.is_empty() || self.m_grid.iter().any(|m| !m.is_finite()) || !self.x0.is_finite() {
            return Err(MmError::Contract("m grid must be nonempty and finite, x0 finite".into()));
        }
        if self.estimators.is_empty() {
            return Err(MmError::Contract("no estimators selected".into()));
        }
        if !(0.0..1.0).contains(&self.trim) || self.n_subsamples == 0 {
            return Err(MmError::Contract("trim must lie in [0, 1) and n_subsamples be positive".into()));
        }
        Ok(())
    }

    pub fn n_outliers(&self) -> usize {
        (self.contamination_fraction * self.n as f64 + 1e-9).floor() as usize
    }
}

/// Generator for replication `index`: the seed and index are mixed through
/// SplitMix64 by `seed_from_u64`, so streams are unrelated.
pub fn rep_rng(seed: u64, index: u64) -> Xoshiro256PlusPlus {
    let mut base = Xoshiro256PlusPlus::seed_from_u64(seed);
    let salt: u64 = base.gen();
    Xoshiro256PlusPlus::seed_from_u64(salt ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `B0 = 0`, `Sigma0 = I`, standard normal predictors; the first
/// `floor(fraction n)` rows are replaced by `x = x0 e1`, `y = m x0 e1`.
/// The clean draws depend only on `(seed, rep_index)`, not on `m`.
pub fn generate_sample(sc: &Scenario, rep_index: usize, m: f64) -> Result<Dataset> {
    let mut rng = rep_rng(sc.seed, rep_index as u64);
    let mut x = DMatrix::zeros(sc.n, sc.p);
    let mut y = DMatrix::zeros(sc.n, sc.q);
    for i in 0..sc.n {
        for j in 0..sc.p {
            x[(i, j)] = rng.sample(StandardNormal);
        }
        for j in 0..sc.q {
            y[(i, j)] = rng.sample(StandardNormal);
        }
    }
    for i in 0..sc.n_outliers() {
        x.row_mut(i).fill(0.0);
        y.row_mut(i).fill(0.0);
        x[(i, 0)] = sc.x0;
        y[(i, 0)] = m * sc.x0;
    }
    Dataset::new(x, y)
}

/// Mean, and mean of the smallest `ceil((1 - trim) K)` values.
pub fn mse_tmse(errors: &[f64], trim: f64) -> Result<(f64, f64)> {
    if errors.is_empty() || !(0.0..1.0).contains(&trim) {
        return Err(MmError::Contract("mse_tmse needs values and trim in [0, 1)".into()));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let keep = (((1.0 - trim) * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let tmean = sorted[..keep].iter().sum::<f64>() / keep as f64;
    // keep TMSE <= MSE exact despite summation order
    Ok((mean, tmean.min(mean)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: Estimator,
    pub m: f64,
    pub mse: f64,
    pub tmse: f64,
    pub se: f64,
    pub reff: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub c0: f64,
    pub c1: f64,
    pub clean_mle_mse: f64,
    pub rows: Vec<MetricRow>,
}

impl SimulationReport {
    pub fn row(&self, est: Estimator, m: f64) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimator == est && r.m == m)
    }

    /// Long format: `estimator,m,metric,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| MmError::Contract(format!("csv output failed: {e}"));
        w.write_record(["estimator", "m", "metric", "value"]).map_err(err)?;
        for r in &self.rows {
            for (metric, value) in [("mse", r.mse), ("tmse", r.tmse), ("se", r.se), ("reff", r.reff)] {
                w.write_record([
                    r.estimator.name().to_string(),
                    format!("{}", r.m),
                    metric.to_string(),
                    format!("{value}"),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| MmError::Contract(format!("csv output failed: {e}")))?;
        Ok(())
    }
}

/// Squared Frobenius error of each requested estimator on one sample;
/// `None` marks a failed fit.
fn replicate(data: &Dataset, sc: &Scenario, cfg: &MMConfig, rep: usize) -> Vec<Option<f64>> {
    let want = |e| sc.estimators.contains(&e);
    let mut out = vec![None; 3];
    if want(Estimator::Mle) {
        out[0] = mle_fit(data).ok().map(|f| f.coef.squared_frobenius());
    }
    if want(Estimator::S) || want(Estimator::Mm) {
        let s_cfg =
            SConfig { n_subsamples: sc.n_subsamples, seed: sc.seed ^ (rep as u64), b: cfg.b, ..SConfig::default() };
        if let Ok(init) = s_estimate(data, &s_cfg, &cfg.scale_kernel()) {
            if want(Estimator::S) {
                out[1] = Some(init.coef.squared_frobenius());
            }
            if want(Estimator::Mm) {
                out[2] = mm_fit(data, cfg, &init).ok().map(|f| f.coef.squared_frobenius());
            }
        }
    }
    out
}

fn aggregate(errs: &[Option<f64>], reps: usize, trim: f64) -> Result<(f64, f64, f64, usize)> {
    let ok: Vec<f64> = errs.iter().flatten().copied().collect();
    let failed = reps - ok.len();
    if failed > 0 && 100 * failed >= reps {
        return Err(MmError::ReplicationFailures { failed, total: reps });
    }
    let (mse, tmse) = mse_tmse(&ok, trim)?;
    let k = ok.len() as f64;
    let var = if ok.len() > 1 { ok.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (k - 1.0) } else { 0.0 };
    Ok((mse, tmse, (var / k).sqrt(), failed))
}

/// Fits every replication for every `m`, with REFF taken against the MLE
/// on the uncontaminated versions of the same samples.
pub fn run_simulation(sc: &Scenario, cfg: &MMConfig) -> Result<SimulationReport> {
    sc.validate()?;
    cfg.validate()?;
    let clean_errs: Vec<Option<f64>> = (0..sc.reps)
        .into_par_iter()
        .map(|r| {
            let clean = Scenario { contamination_fraction: 0.0, ..sc.clone() };
            generate_sample(&clean, r, 0.0).ok().and_then(|d| mle_fit(&d).ok()).map(|f| f.coef.squared_frobenius())
        })
        .collect();
    let clean_mle_mse = aggregate(&clean_errs, sc.reps, sc.trim)?.0;

    let grid: Vec<f64> = if sc.n_outliers() == 0 { vec![sc.m_grid[0]] } else { sc.m_grid.clone() };
    let mut rows = Vec::new();
    for &m in &grid {
        let per_rep: Vec<Vec<Option<f64>>> = (0..sc.reps)
            .into_par_iter()
            .map(|r| match generate_sample(sc, r, m) {
                Ok(d) => replicate(&d, sc, cfg, r),
                Err(_) => vec![None; 3],
            })
            .collect();
        for (slot, est) in Estimator::ALL.iter().enumerate() {
            if !sc.estimators.contains(est) {
                continue;
            }
            let errs: Vec<Option<f64>> = per_rep.iter().map(|v| v[slot]).collect();
            let (mse, tmse, se, failures) = aggregate(&errs, sc.reps, sc.trim)?;
            rows.push(MetricRow { estimator: *est, m, mse, tmse, se, reff: clean_mle_mse / mse, failures });
        }
    }
    Ok(SimulationReport {
        schema_version: SCHEMA_VERSION,
        scenario: sc.clone(),
        c0: cfg.c0,
        c1: cfg.c1,
        clean_mle_mse,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVRow {
    pub estimator: Estimator,
    pub component: usize,
    pub mse: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub schema_version: u32,
    pub folds: usize,
    pub seed: u64,
    /// Fold of each observation.
    pub assignment: Vec<usize>,
    pub tau_c0: f64,
    pub tau_c2: f64,
    pub rows: Vec<CVRow>,
}

/// Seeded random partition into `folds` groups whose sizes differ by at most 1.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn fit_coef(train: &Dataset, est: Estimator, cfg: &MMConfig, s_cfg: &SConfig) -> Result<CoefMatrix> {
    match est {
        Estimator::Mle => Ok(mle_fit(train)?.coef),
        Estimator::S => Ok(s_estimate(train, s_cfg, &cfg.scale_kernel())?.coef),
        Estimator::Mm => {
            let init = s_estimate(train, s_cfg, &cfg.scale_kernel())?;
            Ok(mm_fit(train, cfg, &init)?.coef)
        }
    }
}

/// Prediction MSE and tau-scale per response component for each estimator.
pub fn cross_validate(
    data: &Dataset,
    folds: usize,
    cfg: &MMConfig,
    seed: u64,
    n_subsamples: usize,
    estimators: &[Estimator],
) -> Result<CVReport> {
    cfg.validate()?;
    let (n, q) = (data.n(), data.q());
    if folds < 2 || n < 2 * folds {
        return Err(MmError::Contract(format!("need folds >= 2 and n >= 2 folds, got n = {n}, folds = {folds}")));
    }
    let assignment = fold_assignment(n, folds, seed);
    let s_cfg = SConfig { n_subsamples, seed, b: cfg.b, ..SConfig::default() };
    let tau_c0 = solve_c0(1, cfg.b)?;
    let tau_c2 = solve_tau_c2(TAU_EFFICIENCY, cfg.b)?;
    let (k0, k2) = (RhoKernel::bisquare(tau_c0), RhoKernel::bisquare(tau_c2));

    let mut rows = Vec::new();
    for &est in estimators {
        let mut errors = DMatrix::zeros(n, q);
        for f in 0..folds {
            let train_rows: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
            let test_rows: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
            let coef = fit_coef(&data.select_rows(&train_rows)?, est, cfg, &s_cfg)?;
            for &i in &test_rows {
                let pred = data.x().row(i) * coef.matrix();
                errors.row_mut(i).copy_from(&(data.y().row(i) - pred));
            }
        }
        for j in 0..q {
            let col: Vec<f64> = errors.column(j).iter().map(|e| e.abs()).collect();
            let mse = col.iter().map(|e| e * e).sum::<f64>() / n as f64;
            rows.push(CVRow { estimator: est, component: j, mse, tau: tau_scale(&col, &k0, &k2, cfg.b)? });
        }
    }
    Ok(CVReport { schema_version: SCHEMA_VERSION, folds, seed, assignment, tau_c0, tau_c2, rows })
}
