//! MM-estimation of the coefficient matrix and the error scatter.
//!
//! Starting from a high-breakdown `(B0, Gamma0)` with `det(Gamma0) = 1`, the
//! scale `sigma` is the M-scale (kernel `c0`) of the Mahalanobis norms
//! `d_i(B0, Gamma0)` and stays fixed. The fit then minimizes
//! `sum_i rho1(d_i(B, Gamma) / sigma)` over `det(Gamma) = 1` by iteratively
//! reweighted least squares with weights `W1(d_i(B, Sigma))`, where
//! `Sigma = sigma^2 Gamma`. Each step is a descent step for the objective.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::ConstantsTable;
use crate::error::{MmError, Result};
use crate::initial_s::SCandidate;
use crate::model::{
    exactly_fitted_rows, mahalanobis_norms, residuals, shape_of, weighted_cross_product, weighted_ls, CoefMatrix,
    Dataset, Scatter,
};
use crate::rho::{BoundedRho, RhoKernel};
use crate::scale::{m_scale, DEFAULT_B};

/// Slack allowed when comparing objective values for descent.
pub const DESCENT_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MMConfig {
    pub b: f64,
    /// Scale kernel constant (breakdown).
    pub c0: f64,
    /// Loss kernel constant (efficiency).
    pub c1: f64,
    pub delta: f64,
    pub max_iters: usize,
}

impl MMConfig {
    pub fn new(b: f64, c0: f64, c1: f64) -> Result<Self> {
        let cfg = Self { b, c0, c1, delta: 1e-4, max_iters: 500 };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Constants for response dimension `q` at scale level `b` and the
    /// requested Gaussian efficiency, from the shipped table when tabulated.
    pub fn calibrated(q: usize, b: f64, target_are: f64) -> Result<Self> {
        let (c0, c1) = ConstantsTable::shipped().constants_for(q, b, target_are)?;
        Self::new(b, c0, c1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0 && self.b < 1.0) {
            return Err(MmError::Contract(format!("b must lie in (0, 1), got {}", self.b)));
        }
        if !(self.c0 > 0.0 && self.c0 < self.c1 && self.c1.is_finite()) {
            return Err(MmError::Contract(format!(
                "need 0 < c0 < c1 so that rho1 <= rho0, got c0 = {}, c1 = {}",
                self.c0, self.c1
            )));
        }
        if !(self.delta > 0.0) || self.max_iters == 0 {
            return Err(MmError::Contract("delta must be positive and max_iters at least 1".into()));
        }
        Ok(())
    }

    pub fn scale_kernel(&self) -> RhoKernel {
        RhoKernel::bisquare(self.c0)
    }

    pub fn loss_kernel(&self) -> RhoKernel {
        RhoKernel::bisquare(self.c1)
    }
}

impl Default for MMConfig {
    /// Bivariate responses at 90% efficiency.
    fn default() -> Self {
        Self::calibrated(2, DEFAULT_B, 0.90).expect("tabulated constants")
    }
}

/// Result of a fit. `scatter` equals `scale^2 * shape` and is the zero
/// matrix for an exact fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub coef: CoefMatrix,
    pub shape: Scatter,
    pub scatter: DMatrix<f64>,
    pub scale: f64,
    /// `d_i(B, Sigma)`; for an exact fit, the norms against `shape` instead.
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Objective after each iteration, starting with the initial estimate.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub exact_fit: bool,
    /// Set when the iterate failed `S(B, Gamma) <= S(initial)` and the
    /// initial estimate was returned instead.
    pub fell_back: bool,
}

/// `sum_i rho1(d_i(B, Gamma) / sigma)`.
pub fn objective(data: &Dataset, b: &CoefMatrix, gamma: &Scatter, sigma: f64, k1: &RhoKernel) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(MmError::Contract(format!("objective needs a positive scale, got {sigma}")));
    }
    let d = mahalanobis_norms(&residuals(data, b)?, gamma)?;
    Ok(d.iter().map(|&di| k1.rho(di / sigma)).sum())
}

/// One IRWLS update: weighted LS for `B` with weights `W1(d_i(B, Sigma))`,
/// then `Sigma' = sigma^2 * C / det(C)^(1/q)` for the weighted residual
/// cross-product `C`.
pub fn irwls_step(
    data: &Dataset,
    b: &CoefMatrix,
    sigma_mat: &Scatter,
    sigma: f64,
    k1: &RhoKernel,
) -> Result<(CoefMatrix, Scatter)> {
    let d = mahalanobis_norms(&residuals(data, b)?, sigma_mat)?;
    let w: Vec<f64> = d.iter().map(|&di| k1.weight(di)).collect();
    let support = w.iter().filter(|&&wi| wi > 0.0).count();
    if support == 0 {
        return Err(MmError::NoSupport);
    }
    let coef = CoefMatrix::new(weighted_ls(data.x(), data.y(), &w)?)?;
    let u = residuals(data, &coef)?;
    let shape = shape_of(weighted_cross_product(&u, &w))?;
    Ok((coef, shape.scaled(sigma * sigma)?))
}

/// `W(0)` on the rows lying on the fit, 0 elsewhere: the limit of
/// `W(d_i / sigma)` as `sigma -> 0`.
fn exact_fit_weights(data: &Dataset, coef: &CoefMatrix, k: &RhoKernel) -> Result<Vec<f64>> {
    Ok(exactly_fitted_rows(data, coef)?.into_iter().map(|e| if e { k.weight(0.0) } else { 0.0 }).collect())
}

fn rel_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(1e-12)
}

/// MM-estimate from the initial estimate `initial`.
pub fn mm_fit(data: &Dataset, cfg: &MMConfig, initial: &SCandidate) -> Result<FitResult> {
    cfg.validate()?;
    if (initial.shape.det() - 1.0).abs() > 1e-8 {
        return Err(MmError::Contract(format!(
            "initial shape must have unit determinant, got {}",
            initial.shape.det()
        )));
    }
    let k0 = cfg.scale_kernel();
    let k1 = cfg.loss_kernel();
    let d0 = mahalanobis_norms(&residuals(data, &initial.coef)?, &initial.shape)?;
    // a zero initial scale certifies an exact fit
    let sigma = if initial.scale == 0.0 { 0.0 } else { m_scale(&d0, &k0, cfg.b)?.sigma };

    if sigma == 0.0 {
        let q = data.q();
        let weights = exact_fit_weights(data, &initial.coef, &k1)?;
        return Ok(FitResult {
            coef: initial.coef.clone(),
            shape: initial.shape.clone(),
            scatter: DMatrix::zeros(q, q),
            scale: 0.0,
            distances: d0,
            weights,
            objective_trace: Vec::new(),
            iterations: 0,
            converged: true,
            exact_fit: true,
            fell_back: false,
        });
    }

    let s2 = sigma * sigma;
    let start_objective: f64 = d0.iter().map(|&d| k1.rho(d / sigma)).sum();
    let mut coef = initial.coef.clone();
    let mut sigma_mat = initial.shape.scaled(s2)?;
    let mut dist: Vec<f64> = d0.iter().map(|&d| d / sigma).collect();
    let mut trace = vec![start_objective];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let (next_coef, next_sigma) = irwls_step(data, &coef, &sigma_mat, sigma, &k1)?;
        let next_dist = mahalanobis_norms(&residuals(data, &next_coef)?, &next_sigma)?;
        trace.push(next_dist.iter().map(|&d| k1.rho(d)).sum());

        let coef_change =
            coef.matrix().iter().zip(next_coef.matrix().iter()).map(|(&a, &b)| rel_change(a, b)).fold(0.0, f64::max);
        let dist_change = dist.iter().zip(&next_dist).map(|(&a, &b)| rel_change(a, b)).fold(0.0, f64::max);

        coef = next_coef;
        sigma_mat = next_sigma;
        dist = next_dist;
        if coef_change.max(dist_change) < cfg.delta {
            converged = true;
            break;
        }
    }

    let shape = shape_of(sigma_mat.matrix().clone())?;
    let final_objective = *trace.last().expect("trace starts nonempty");
    if final_objective > start_objective + DESCENT_SLACK {
        let weights = d0.iter().map(|&d| k1.weight(d / sigma)).collect();
        return Ok(FitResult {
            coef: initial.coef.clone(),
            shape: initial.shape.clone(),
            scatter: initial.shape.matrix() * s2,
            scale: sigma,
            distances: d0.iter().map(|&d| d / sigma).collect(),
            weights,
            objective_trace: vec![start_objective],
            iterations,
            converged,
            exact_fit: false,
            fell_back: true,
        });
    }
    let weights = dist.iter().map(|&d| k1.weight(d)).collect();
    Ok(FitResult {
        coef,
        scatter: shape.matrix() * s2,
        shape,
        scale: sigma,
        distances: dist,
        weights,
        objective_trace: trace,
        iterations,
        converged,
        exact_fit: false,
        fell_back: false,
    })
}

/// Gaussian maximum likelihood: column-wise least squares and the residual
/// covariance with divisor n.
pub fn mle_fit(data: &Dataset) -> Result<FitResult> {
    let (n, q) = (data.n(), data.q());
    let coef = CoefMatrix::new(weighted_ls(data.x(), data.y(), &vec![1.0; n])?)?;
    let u = residuals(data, &coef)?;
    if exactly_fitted_rows(data, &coef)?.iter().all(|&e| e) {
        return Ok(FitResult {
            coef,
            shape: Scatter::identity(q),
            scatter: DMatrix::zeros(q, q),
            scale: 0.0,
            distances: vec![0.0; n],
            weights: vec![1.0; n],
            objective_trace: Vec::new(),
            iterations: 0,
            converged: true,
            exact_fit: true,
            fell_back: false,
        });
    }
    let cov = Scatter::new(weighted_cross_product(&u, &vec![1.0; n]) / n as f64)?;
    let scale = cov.det().powf(0.5 / q as f64);
    let shape = shape_of(cov.matrix().clone())?;
    let distances = mahalanobis_norms(&u, &cov)?;
    Ok(FitResult {
        coef,
        shape,
        scatter: cov.matrix().clone(),
        scale,
        distances,
        weights: vec![1.0; n],
        objective_trace: Vec::new(),
        iterations: 0,
        converged: true,
        exact_fit: false,
        fell_back: false,
    })
}

/// Reports an S-estimate in the same form as the other fits, with scatter
/// `scale^2 * Gamma` and weights from the scale kernel.
pub fn s_fit_result(data: &Dataset, cand: &SCandidate, k0: &RhoKernel) -> Result<FitResult> {
    let q = data.q();
    let d = mahalanobis_norms(&residuals(data, &cand.coef)?, &cand.shape)?;
    let exact = cand.scale == 0.0;
    let (distances, weights) = if exact {
        (d, exact_fit_weights(data, &cand.coef, k0)?)
    } else {
        let ds: Vec<f64> = d.iter().map(|&x| x / cand.scale).collect();
        let w = ds.iter().map(|&x| k0.weight(x)).collect();
        (ds, w)
    };
    Ok(FitResult {
        coef: cand.coef.clone(),
        shape: cand.shape.clone(),
        scatter: if exact { DMatrix::zeros(q, q) } else { cand.shape.matrix() * (cand.scale * cand.scale) },
        scale: cand.scale,
        distances,
        weights,
        objective_trace: Vec::new(),
        iterations: 0,
        converged: true,
        exact_fit: exact,
        fell_back: false,
    })
}

/// Normalized residuals of the estimating equations at a fit:
/// `|sum_i W(d_i) u_i x_i'| / n` and the relative deviation of `Sigma` from
/// `q sum_i W(d_i) u_i u_i' / sum_i psi(d_i) d_i`.
pub fn estimating_equation_residuals(data: &Dataset, fit: &FitResult, k1: &RhoKernel) -> Result<(f64, f64)> {
    let n = data.n() as f64;
    let u = residuals(data, &fit.coef)?;
    let sigma = Scatter::new(fit.scatter.clone())?;
    let d = mahalanobis_norms(&u, &sigma)?;
    let w: Vec<f64> = d.iter().map(|&di| k1.weight(di)).collect();
    let mut uw = u.clone();
    for (mut row, &wi) in uw.row_iter_mut().zip(&w) {
        row *= wi;
    }
    let score = data.x().transpose() * &uw;
    let coef_residual = score.norm() / n;
    let denom: f64 = d.iter().map(|&di| k1.psi(di) * di).sum();
    let implied = weighted_cross_product(&u, &w) * (data.q() as f64 / denom);
    let scatter_residual = (&implied - &fit.scatter).norm() / fit.scatter.norm();
    Ok((coef_residual, scatter_residual))
}
