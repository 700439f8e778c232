//! Univariate robust scales: the M-scale and the tau-scale built on it.

use serde::{Deserialize, Serialize};

use crate::error::{MmError, Result};
use crate::rho::{BoundedRho, RhoKernel};

/// Default scale level; gives the maximal asymptotic breakdown point.
pub const DEFAULT_B: f64 = 0.5;

const MAX_ITERS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub sigma: f64,
    pub iterations: usize,
    /// `mean rho(v / sigma) - b` at the returned sigma (0 on the zero branch).
    pub residual: f64,
}

fn mean_rho(v: &[f64], k: &RhoKernel, s: f64) -> f64 {
    let inv = 1.0 / s;
    v.iter().map(|&x| k.rho(x * inv)).sum::<f64>() / v.len() as f64
}

fn validate(v: &[f64], b: f64) -> Result<()> {
    if v.is_empty() {
        return Err(MmError::Contract("scale of an empty sample".into()));
    }
    if !(b > 0.0 && b < 1.0) {
        return Err(MmError::Contract(format!("scale level b must lie in (0, 1), got {b}")));
    }
    if let Some(bad) = v.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
        return Err(MmError::Contract(format!("scale input must be finite and nonnegative, got {bad}")));
    }
    Ok(())
}

/// M-scale: the `s` solving `mean_i rho0(v_i / s) = b`, or 0 when at least
/// `n (1 - b)` of the `v_i` are exactly zero.
///
/// The left side is continuous and nonincreasing in `s`, so the root is
/// bracketed and then polished with Illinois false position in `log s`,
/// which never leaves the bracket.
pub fn m_scale(v: &[f64], k0: &RhoKernel, b: f64) -> Result<ScaleEstimate> {
    validate(v, b)?;
    let n = v.len() as f64;
    let zeros = v.iter().filter(|&&x| x == 0.0).count() as f64;
    if zeros >= n * (1.0 - b) {
        return Ok(ScaleEstimate { sigma: 0.0, iterations: 0, residual: 0.0 });
    }
    let min_pos = v.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
    let max_v = v.iter().copied().fold(0.0, f64::max);
    let c = k0.saturation();

    let f = |log_s: f64| mean_rho(v, k0, log_s.exp()) - b;
    let mut iterations = 0;
    let mut lo = (min_pos / (10.0 * c)).ln();
    let mut f_lo = f(lo);
    while f_lo <= 0.0 {
        lo -= std::f64::consts::LN_10;
        f_lo = f(lo);
        iterations += 1;
    }
    let mut hi = (max_v * 10.0 / c).ln();
    let mut f_hi = f(hi);
    while f_hi >= 0.0 {
        hi += std::f64::consts::LN_10;
        f_hi = f(hi);
        iterations += 1;
    }

    // f_lo > 0 > f_hi throughout
    let mut side = 0i8;
    let (mut best, mut f_best) = if f_lo.abs() < f_hi.abs() { (lo, f_lo) } else { (hi, f_hi) };
    while iterations < MAX_ITERS {
        iterations += 1;
        if hi - lo <= 1e-15 * (1.0 + hi.abs()) {
            break;
        }
        let mut t = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        if !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
            if !(t > lo && t < hi) {
                break;
            }
        }
        let ft = f(t);
        if ft.abs() < f_best.abs() {
            best = t;
            f_best = ft;
        }
        if ft == 0.0 {
            break;
        } else if ft > 0.0 {
            lo = t;
            f_lo = ft;
            if side == 1 {
                f_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = t;
            f_hi = ft;
            if side == -1 {
                f_lo *= 0.5;
            }
            side = -1;
        }
    }
    let sigma = best.exp();
    debug_assert!(f_best.abs() <= 1e-9, "M-scale residual {f_best}");
    Ok(ScaleEstimate { sigma, iterations, residual: f_best })
}

/// tau-scale: `sqrt( s^2 / n * sum_i rho2(v_i / s) )` with `s` the M-scale under `k0`.
pub fn tau_scale(v: &[f64], k0: &RhoKernel, k2: &RhoKernel, b: f64) -> Result<f64> {
    let s = m_scale(v, k0, b)?.sigma;
    if s == 0.0 {
        return Ok(0.0);
    }
    Ok(s * mean_rho(v, k2, s).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const C0_Q1: f64 = 1.547_644_980_928_226_2;

    #[test]
    fn zero_rule() {
        let k = RhoKernel::bisquare(1.0);
        assert_eq!(m_scale(&[0.0, 0.0], &k, 0.5).unwrap().sigma, 0.0);
        // 2 zeros of 4 with b = 0.5: 2 >= 4 * 0.5 ties to zero
        assert_eq!(m_scale(&[0.0, 0.0, 1.0, 2.0], &k, 0.5).unwrap().sigma, 0.0);
        assert!(m_scale(&[0.0, 1.0, 1.0, 2.0], &k, 0.5).unwrap().sigma > 0.0);
    }

    #[test]
    fn empty_is_contract_violation() {
        let k = RhoKernel::bisquare(1.0);
        assert!(matches!(m_scale(&[], &k, 0.5), Err(MmError::Contract(_))));
        assert!(matches!(m_scale(&[-1.0], &k, 0.5), Err(MmError::Contract(_))));
    }

    #[test]
    fn constant_sample_closed_form() {
        // (1 - u^2)^3 = 0.5  =>  u = sqrt(1 - 0.5^(1/3))
        let u_star = (1.0 - 0.5f64.powf(1.0 / 3.0)).sqrt();
        assert_relative_eq!((1.0 - u_star * u_star).powi(3), 0.5, epsilon = 1e-15);
        assert_relative_eq!(u_star, 0.454202, epsilon = 1e-6);
        let k = RhoKernel::bisquare(C0_Q1);
        let a = 2.5;
        let est = m_scale(&[a; 7], &k, 0.5).unwrap();
        assert_relative_eq!(est.sigma, a / (C0_Q1 * u_star), max_relative = 1e-10);
        assert!(est.residual.abs() <= 1e-9);
    }

    #[test]
    fn tau_examples() {
        let k0 = RhoKernel::bisquare(C0_Q1);
        let k2 = RhoKernel::bisquare(3.0);
        assert_eq!(tau_scale(&[0.0; 5], &k0, &k2, 0.5).unwrap(), 0.0);
        let a = 1.7;
        let s = a / (C0_Q1 * (1.0 - 0.5f64.powf(1.0 / 3.0)).sqrt());
        let expected = (s * s * k2.rho(a / s)).sqrt();
        assert_relative_eq!(tau_scale(&[a; 9], &k0, &k2, 0.5).unwrap(), expected, max_relative = 1e-9);
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![3 => 0.0f64..10.0, 1 => Just(0.0)], 1..60)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn residual_is_tight(v in sample(), c in 0.5f64..8.0, b in 0.1f64..0.9) {
            let k = RhoKernel::bisquare(c);
            let est = m_scale(&v, &k, b).unwrap();
            if est.sigma > 0.0 {
                let r = mean_rho(&v, &k, est.sigma) - b;
                prop_assert!(r.abs() <= 1e-9, "residual {}", r);
            }
        }

        #[test]
        fn scale_equivariant(v in sample(), c in 0.01f64..100.0) {
            let k = RhoKernel::bisquare(1.547);
            let s1 = m_scale(&v, &k, 0.5).unwrap().sigma;
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let s2 = m_scale(&scaled, &k, 0.5).unwrap().sigma;
            prop_assert!((s2 - c * s1).abs() <= 1e-12 * (c * s1).max(f64::MIN_POSITIVE));
            let k2 = RhoKernel::bisquare(3.0);
            let t1 = tau_scale(&v, &k, &k2, 0.5).unwrap();
            let t2 = tau_scale(&scaled, &k, &k2, 0.5).unwrap();
            prop_assert!((t2 - c * t1).abs() <= 1e-10 * (c * t1).max(f64::MIN_POSITIVE));
        }

        #[test]
        fn monotone_in_sample(v in sample(), bumps in prop::collection::vec(0.0f64..3.0, 60)) {
            let k = RhoKernel::bisquare(2.0);
            let w: Vec<f64> = v.iter().zip(&bumps).map(|(x, d)| x + d).collect();
            let s = m_scale(&v, &k, 0.5).unwrap().sigma;
            let t = m_scale(&w, &k, 0.5).unwrap().sigma;
            prop_assert!(t >= s * (1.0 - 1e-12));
        }

        /// With m < n(1 - b) entries replaced by arbitrarily large values the
        /// equation still has a root, and it is bounded by the scale at which
        /// the clean entries alone reach level b: mean rho <= m/n + (n-m)/n * mean_clean rho.
        #[test]
        fn resists_explosion(clean in prop::collection::vec(0.1f64..5.0, 20..40), frac in 0.0f64..0.45, mag in 1e3f64..1e12) {
            let k = RhoKernel::bisquare(1.547);
            let n = clean.len();
            let m = ((n as f64) * frac).floor() as usize;
            let mut v = clean.clone();
            for x in v.iter_mut().take(m) {
                *x = mag;
            }
            let s = m_scale(&v, &k, 0.5).unwrap().sigma;
            let kept = &clean[m..];
            let level = (0.5 * n as f64 - m as f64) / kept.len() as f64;
            let bound = m_scale(kept, &k, level).unwrap().sigma;
            prop_assert!(s.is_finite());
            prop_assert!(s <= bound * (1.0 + 1e-9));
        }
    }
}
