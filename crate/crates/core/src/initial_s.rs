//! High-breakdown starting point: a subsampling S-estimator refined by
//! concentration steps.
//!
//! Each candidate starts from an elemental subsample of `p + q + 1` rows:
//! least squares on those rows gives `B`, and their residual scatter,
//! normalized to unit determinant, gives the shape `Gamma`. A concentration
//! step reweights every observation with the weight function of the scale
//! kernel and refits `B` and `Gamma`, which never increases the M-scale of
//! the Mahalanobis norms. The best few candidates are iterated to
//! convergence and the one with the smallest scale wins, ties going to the
//! lowest candidate index.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MmError, Result};
use crate::model::{
    exactly_fitted_rows, mahalanobis_norms, residuals, shape_of, weighted_cross_product, weighted_ls, CoefMatrix,
    Dataset, Scatter,
};
use crate::rho::{BoundedRho, RhoKernel};
use crate::scale::{m_scale, DEFAULT_B};

/// A coefficient matrix with a unit-determinant shape and the M-scale of
/// the Mahalanobis norms it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct SCandidate {
    pub coef: CoefMatrix,
    pub shape: Scatter,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SConfig {
    pub n_subsamples: usize,
    pub n_concentration: usize,
    pub n_finalists: usize,
    pub seed: u64,
    pub max_refine_iters: usize,
    /// Level of the M-scale equation.
    pub b: f64,
}

impl Default for SConfig {
    fn default() -> Self {
        Self { n_subsamples: 2000, n_concentration: 2, n_finalists: 10, seed: 0, max_refine_iters: 50, b: DEFAULT_B }
    }
}

impl SConfig {
    fn validate(&self) -> Result<()> {
        if self.n_subsamples == 0 || self.n_concentration == 0 || self.n_finalists == 0 || self.max_refine_iters == 0 {
            return Err(MmError::Contract("S-estimator counts must all be at least 1".into()));
        }
        if !(self.b > 0.0 && self.b < 1.0) {
            return Err(MmError::Contract(format!("b must lie in (0, 1), got {}", self.b)));
        }
        Ok(())
    }
}

/// Everything the search produced, for diagnostics.
#[derive(Debug, Clone)]
pub struct SSearch {
    pub best: SCandidate,
    /// Index of the winning candidate among the valid elemental fits.
    pub best_index: usize,
    /// M-scale after each refinement iteration, one trace per finalist.
    pub finalist_traces: Vec<Vec<f64>>,
    pub valid_subsamples: usize,
    pub attempted_subsamples: usize,
}

/// Subsample size used for elemental fits.
pub fn elemental_size(p: usize, q: usize) -> usize {
    p + q + 1
}

/// Draws `k` distinct indices from `0..n` by a partial Fisher–Yates shuffle
/// of `perm`, which must hold a permutation of `0..n`.
pub fn draw_subsample<R: Rng>(rng: &mut R, perm: &mut [usize], k: usize) -> Vec<usize> {
    let n = perm.len();
    for j in 0..k {
        let r = j + rng.gen_range(0..n - j);
        perm.swap(j, r);
    }
    perm[..k].to_vec()
}

fn candidate_from(data: &Dataset, coef: CoefMatrix, shape: Scatter, k0: &RhoKernel, b: f64) -> Result<SCandidate> {
    let d = mahalanobis_norms(&residuals(data, &coef)?, &shape)?;
    let scale = m_scale(&d, k0, b)?.sigma;
    Ok(SCandidate { coef, shape, scale })
}

/// Least-squares fit on the rows `idx`, with the det-normalized residual
/// scatter of those rows as shape. `Ok(None)` means the subsample is singular.
pub fn elemental_fit(data: &Dataset, idx: &[usize], k0: &RhoKernel, b: f64) -> Result<Option<SCandidate>> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.n()) {
        return Err(MmError::Contract(format!("subsample index {bad} out of range")));
    }
    let xs = data.x().select_rows(idx);
    let ys = data.y().select_rows(idx);
    let ones = vec![1.0; idx.len()];
    let coef = match weighted_ls(&xs, &ys, &ones) {
        Ok(b) => b,
        Err(MmError::RankDeficient { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let u = &ys - &xs * &coef;
    let coef = CoefMatrix::new(coef)?;
    let shape = match shape_of(weighted_cross_product(&u, &ones)) {
        Ok(s) => s,
        Err(MmError::SingularScatter { .. }) => return exact_candidate(data, coef, b),
        Err(e) => return Err(e),
    };
    candidate_from(data, coef, shape, k0, b).map(Some)
}

/// A subsample fitted without residual fixes no shape. It still wins
/// outright, with scale 0, if at least `n (1 - b)` rows lie on the fit.
fn exact_candidate(data: &Dataset, coef: CoefMatrix, b: f64) -> Result<Option<SCandidate>> {
    let on_fit = exactly_fitted_rows(data, &coef)?.iter().filter(|&&e| e).count() as f64;
    if on_fit >= data.n() as f64 * (1.0 - b) {
        let q = data.q();
        return Ok(Some(SCandidate { coef, shape: Scatter::identity(q), scale: 0.0 }));
    }
    Ok(None)
}

/// One reweighting step with weights `W0(d_i / scale)`.
pub fn concentration_step(data: &Dataset, cand: &SCandidate, k0: &RhoKernel, b: f64) -> Result<SCandidate> {
    if cand.scale == 0.0 {
        return Ok(cand.clone());
    }
    let d = mahalanobis_norms(&residuals(data, &cand.coef)?, &cand.shape)?;
    let inv = 1.0 / cand.scale;
    let w: Vec<f64> = d.iter().map(|&di| k0.weight(di * inv)).collect();
    if w.iter().all(|&wi| wi == 0.0) {
        return Err(MmError::NoSupport);
    }
    let coef = CoefMatrix::new(weighted_ls(data.x(), data.y(), &w)?)?;
    let u = residuals(data, &coef)?;
    let shape = shape_of(weighted_cross_product(&u, &w))?;
    let next = candidate_from(data, coef, shape, k0, b)?;
    // the step is a descent step; guard against roundoff at a fixed point
    if next.scale > cand.scale {
        return Ok(cand.clone());
    }
    Ok(next)
}

fn concentrate(data: &Dataset, mut cand: SCandidate, steps: usize, k0: &RhoKernel, b: f64) -> Result<SCandidate> {
    for _ in 0..steps {
        cand = concentration_step(data, &cand, k0, b)?;
    }
    Ok(cand)
}

/// Iterates concentration steps until the relative scale change drops
/// below 1e-7, returning the scale trace.
fn refine(data: &Dataset, mut cand: SCandidate, max_iters: usize, k0: &RhoKernel, b: f64) -> (SCandidate, Vec<f64>) {
    let mut trace = vec![cand.scale];
    for _ in 0..max_iters {
        let next = match concentration_step(data, &cand, k0, b) {
            Ok(c) => c,
            Err(_) => break,
        };
        let change = if cand.scale > 0.0 { (cand.scale - next.scale).abs() / cand.scale } else { 0.0 };
        cand = next;
        trace.push(cand.scale);
        if change < 1e-7 {
            break;
        }
    }
    (cand, trace)
}

/// S-estimate of `(B, Gamma)` with `det(Gamma) = 1`.
pub fn s_estimate(data: &Dataset, cfg: &SConfig, k0: &RhoKernel) -> Result<SCandidate> {
    s_search(data, cfg, k0).map(|s| s.best)
}

/// [`s_estimate`] with the search diagnostics.
pub fn s_search(data: &Dataset, cfg: &SConfig, k0: &RhoKernel) -> Result<SSearch> {
    cfg.validate()?;
    let (n, p, q) = (data.n(), data.p(), data.q());
    let k = elemental_size(p, q);
    if n <= 2 * k {
        return Err(MmError::Contract(format!("S-estimation needs n > {}, got n = {n}", 2 * k)));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..n).collect();
    let budget = 10 * cfg.n_subsamples;
    let mut attempted = 0;
    let mut pool: Vec<SCandidate> = Vec::with_capacity(cfg.n_subsamples);

    while pool.len() < cfg.n_subsamples && attempted < budget {
        let batch = (cfg.n_subsamples - pool.len()).min(budget - attempted);
        let subsets: Vec<Vec<usize>> = (0..batch).map(|_| draw_subsample(&mut rng, &mut perm, k)).collect();
        attempted += batch;
        let fitted: Vec<Option<SCandidate>> = subsets
            .par_iter()
            .map(|idx| {
                let cand = elemental_fit(data, idx, k0, cfg.b).ok().flatten()?;
                concentrate(data, cand, cfg.n_concentration, k0, cfg.b).ok()
            })
            .collect();
        pool.extend(fitted.into_iter().flatten());
    }
    if pool.is_empty() {
        return Err(MmError::DegenerateData(format!("no nonsingular subsample among {attempted} draws")));
    }
    let valid = pool.len();

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&i, &j| pool[i].scale.total_cmp(&pool[j].scale).then(i.cmp(&j)));
    order.truncate(cfg.n_finalists);

    let refined: Vec<(usize, SCandidate, Vec<f64>)> = order
        .par_iter()
        .map(|&i| {
            let (c, t) = refine(data, pool[i].clone(), cfg.max_refine_iters, k0, cfg.b);
            (i, c, t)
        })
        .collect();

    let (best_index, best, _) = refined
        .iter()
        .min_by(|a, b| a.1.scale.total_cmp(&b.1.scale).then(a.0.cmp(&b.0)))
        .cloned()
        .expect("at least one finalist");
    Ok(SSearch {
        best,
        best_index,
        finalist_traces: refined.into_iter().map(|(_, _, t)| t).collect(),
        valid_subsamples: valid,
        attempted_subsamples: attempted,
    })
}

/// The S-estimate's own scatter, `scale^2 * Gamma`.
pub fn s_scatter(cand: &SCandidate) -> DMatrix<f64> {
    cand.shape.matrix() * (cand.scale * cand.scale)
}
