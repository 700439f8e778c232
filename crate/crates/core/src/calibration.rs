//! Tuning constants for the bisquare kernels under Gaussian errors.
//!
//! Under a q-variate normal error the Mahalanobis norm follows the chi law
//! with q degrees of freedom, so every expectation reduces to a one-dimensional
//! integral against the chi density. Integrals run over `[0, c]` where the
//! bisquare is polynomial; the flat part contributes its value times the
//! chi survival function.
//!
//! * `c0` makes the M-scale of standard normal residual norms equal to one.
//! * `c1` sets the asymptotic relative efficiency of the MM coefficients.
//! * the tau-scale constant `c2` sets the Gaussian efficiency of the tau-scale
//!   used as a cross-validation criterion.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distributions::{chi_pdf, chi_sf};
use crate::error::{MmError, Result};
use crate::quadrature::integrate_panels;
use crate::rho::{BoundedRho, RhoKernel};

const QUAD_TOL: f64 = 1e-12;

/// The q values tabulated in the shipped constants file.
pub const TABLE_QS: [usize; 6] = [1, 2, 3, 4, 5, 10];
/// The efficiency levels tabulated in the shipped constants file.
pub const TABLE_ARES: [f64; 3] = [0.80, 0.90, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub q: usize,
    pub b: f64,
    pub c0: f64,
    pub c1: f64,
    pub target_are: f64,
    pub achieved_are: f64,
}

/// `E g(V)` for `V ~ chi_q`, where `g` is integrated on `[0, breaks.last()]`
/// and equals `tail` beyond it.
fn chi_expectation<F: Fn(f64) -> f64>(q: usize, g: F, breaks: &[f64], tail: f64) -> f64 {
    let body = integrate_panels(|t| g(t) * chi_pdf(t, q), breaks, QUAD_TOL);
    let end = *breaks.last().expect("at least one panel");
    body + tail * chi_sf(end, q)
}

fn check_q(q: usize) -> Result<()> {
    if q == 0 {
        return Err(MmError::Contract("q must be at least 1".into()));
    }
    Ok(())
}

/// `E rho_B(V / c)` with `V ~ chi_q`.
pub fn expected_rho(c: f64, q: usize) -> Result<f64> {
    check_q(q)?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(MmError::Contract(format!("tuning constant must be positive, got {c}")));
    }
    let k = RhoKernel::bisquare(c);
    Ok(chi_expectation(q, |t| k.rho(t), &[0.0, c], 1.0))
}

/// Bisection for a decreasing function `f` crossing zero, on a bracket
/// grown geometrically from `start`.
fn solve_decreasing<F: Fn(f64) -> Result<f64>>(f: F, start: f64, tol: f64) -> Result<f64> {
    let mut lo = start;
    let mut hi = start;
    while f(lo)? < 0.0 {
        lo /= 2.0;
    }
    while f(hi)? > 0.0 {
        hi *= 2.0;
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The `c0` with `E rho_B(V / c0) = b` for `V ~ chi_q`.
pub fn solve_c0(q: usize, b: f64) -> Result<f64> {
    check_q(q)?;
    if !(b > 0.0 && b < 1.0) {
        return Err(MmError::Contract(format!("b must lie in (0, 1), got {b}")));
    }
    solve_decreasing(|c| Ok(expected_rho(c, q)? - b), 1.0 + q as f64, 1e-10)
}

/// `E psi_1(V)^2` for `V ~ chi_q`.
pub fn expected_psi_sq(c1: f64, q: usize) -> f64 {
    let k = RhoKernel::bisquare(c1);
    chi_expectation(q, |v| k.psi(v).powi(2), &[0.0, c1], 0.0)
}

/// `E W*(V)` for `V ~ chi_q`, with `W*(v) = W(v) + (2/q) W1'(v^2) v^2`, the
/// radial factor of the derivative of `E W(|u|) u x'` in the coefficients.
pub fn expected_w_star(c1: f64, q: usize) -> f64 {
    let k = RhoKernel::bisquare(c1);
    let qf = q as f64;
    chi_expectation(q, |v| k.weight(v) + 2.0 / qf * k.w1_prime(v * v) * v * v, &[0.0, c1], 0.0)
}

/// Asymptotic efficiency of the MM coefficients relative to least squares
/// under q-variate normal errors, with the scale calibrated to one:
/// `E V^2 (E W*)^2 / E psi_1^2`, where `E V^2 = q`.
pub fn are(c1: f64, q: usize) -> Result<f64> {
    check_q(q)?;
    if !(c1 > 0.0 && c1.is_finite()) {
        return Err(MmError::Contract(format!("tuning constant must be positive, got {c1}")));
    }
    // With almost no mass below c1 the expectations are lost in quadrature error.
    let denom = expected_psi_sq(c1, q);
    if !(denom > 0.0) || 1.0 - chi_sf(c1, q) < QUAD_TOL {
        return Err(MmError::DegenerateKernel(format!("E psi^2 vanishes for c1 = {c1}, q = {q}")));
    }
    let w = expected_w_star(c1, q);
    Ok(q as f64 * w * w / denom)
}

/// The `c1` reaching the target efficiency, to 1e-9 in efficiency.
pub fn solve_c1(q: usize, target: f64) -> Result<f64> {
    check_q(q)?;
    if !(target > 0.0 && target < 1.0) {
        return Err(MmError::Contract(format!("target efficiency must lie in (0, 1), got {target}")));
    }
    // efficiency rises with c1; grow a bracket around the breakdown constant
    let start = solve_c0(q, 0.5)?;
    let gap = |c: f64| -> Result<f64> { Ok(target - are(c, q)?) };
    let mut lo = start;
    let mut hi = start;
    while gap(lo)? < 0.0 {
        lo /= 1.25;
    }
    while gap(hi)? > 0.0 {
        hi *= 1.25;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = gap(mid)?;
        if g.abs() <= 1e-10 || hi - lo <= 1e-12 {
            return Ok(mid);
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Both constants for one response dimension.
pub fn calibrate(q: usize, b: f64, target_are: f64) -> Result<CalibrationResult> {
    let c0 = solve_c0(q, b)?;
    let c1 = solve_c1(q, target_are)?;
    let achieved_are = are(c1, q)?;
    Ok(CalibrationResult { q, b, c0, c1, target_are, achieved_are })
}

/// Gaussian efficiency of the tau-scale (q = 1) built from the M-scale kernel
/// `c0` at level `b` and the second kernel `c2`, relative to the standard
/// deviation.
///
/// With `T = s^2 E rho2(V/s)`, the influence function of `T` at the normal is
/// `s^2 [ (rho2 - R) + K (rho0 - b) ]` with `R = E rho2`,
/// `K = (2R - E psi2 V/s) / E psi0 V/s`; the efficiency of `sqrt(T)` is
/// `2 R^2 / E[(rho2 - R + K (rho0 - b))^2]`.
pub fn tau_efficiency(c0: f64, c2: f64, b: f64) -> Result<f64> {
    // asymptotic M-scale of |N(0,1)| under the c0 kernel
    let s0 = solve_c0(1, b)? / c0;
    let k0 = RhoKernel::bisquare(c0 * s0);
    let k2 = RhoKernel::bisquare(c2 * s0);
    let (lo, hi) = if k0.c < k2.c { (k0.c, k2.c) } else { (k2.c, k0.c) };
    let breaks = [0.0, lo, hi];
    let e = |g: &dyn Fn(f64) -> f64, tail: f64| chi_expectation(1, g, &breaks, tail);
    let a = e(&|v| k0.psi(v) * v, 0.0);
    let r = e(&|v| k2.rho(v), 1.0);
    let g = e(&|v| k2.psi(v) * v, 0.0);
    let k = (2.0 * r - g) / a;
    let tail = (1.0 - r) + k * (1.0 - b);
    let var = e(&|v| (k2.rho(v) - r + k * (k0.rho(v) - b)).powi(2), tail * tail);
    Ok(2.0 * r * r / var)
}

/// The tau-scale constant `c2` giving the requested Gaussian efficiency.
pub fn solve_tau_c2(efficiency: f64, b: f64) -> Result<f64> {
    if !(efficiency > 0.0 && efficiency < 1.0) {
        return Err(MmError::Contract(format!("efficiency must lie in (0, 1), got {efficiency}")));
    }
    let c0 = solve_c0(1, b)?;
    solve_decreasing(|c| Ok(efficiency - tau_efficiency(c0, c, b)?), 2.0 * c0, 1e-10)
}

/// Tabulated tuning constants keyed by (q, level).
///
/// Text format, one entry per line, `#` starts a comment:
///
/// ```text
/// c0 <q> <b> <value>
/// c1 <q> <are> <value>
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstantsTable {
    c0: BTreeMap<(usize, u64), f64>,
    c1: BTreeMap<(usize, u64), f64>,
}

fn level_key(level: f64) -> u64 {
    (level * 1e6).round() as u64
}

/// The constants file shipped with the crate.
pub const SHIPPED_CONSTANTS: &str = include_str!("../data/constants.txt");

impl ConstantsTable {
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_CONSTANTS).expect("shipped constants file parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || MmError::Contract(format!("constants line {}: cannot parse {line:?}", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            let q: usize = fields[1].parse().map_err(|_| bad())?;
            let level: f64 = fields[2].parse().map_err(|_| bad())?;
            let value: f64 = fields[3].parse().map_err(|_| bad())?;
            match fields[0] {
                "c0" => table.c0.insert((q, level_key(level)), value),
                "c1" => table.c1.insert((q, level_key(level)), value),
                _ => return Err(bad()),
            };
        }
        Ok(table)
    }

    /// Computes every entry for the given grids.
    pub fn generate(qs: &[usize], b: f64, ares: &[f64]) -> Result<Self> {
        let mut table = Self::default();
        for &q in qs {
            table.c0.insert((q, level_key(b)), solve_c0(q, b)?);
            for &e in ares {
                table.c1.insert((q, level_key(e)), solve_c1(q, e)?);
            }
        }
        Ok(table)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# bisquare tuning constants under Gaussian errors\n# kind q level value\n");
        for (&(q, level), v) in &self.c0 {
            let _ = writeln!(out, "c0 {q} {:.2} {v:.10}", level as f64 / 1e6);
        }
        for (&(q, level), v) in &self.c1 {
            let _ = writeln!(out, "c1 {q} {:.2} {v:.10}", level as f64 / 1e6);
        }
        out
    }

    pub fn c0(&self, q: usize, b: f64) -> Option<f64> {
        self.c0.get(&(q, level_key(b))).copied()
    }

    pub fn c1(&self, q: usize, are: f64) -> Option<f64> {
        self.c1.get(&(q, level_key(are))).copied()
    }

    /// Table lookup, computing the constants when the key is absent.
    pub fn constants_for(&self, q: usize, b: f64, target_are: f64) -> Result<(f64, f64)> {
        let c0 = match self.c0(q, b) {
            Some(c) => c,
            None => solve_c0(q, b)?,
        };
        let c1 = match self.c1(q, target_are) {
            Some(c) => c,
            None => solve_c1(q, target_are)?,
        };
        Ok((c0, c1))
    }
}
