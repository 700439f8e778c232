//! Chi and chi-squared laws used for calibration and QQ diagnostics.

use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

/// Density of the chi distribution with `q` degrees of freedom, the law of
/// `|u|` for a standard q-variate normal `u`.
pub fn chi_pdf(t: f64, q: usize) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let k = q as f64;
    if t == 0.0 {
        return if q == 1 { (2.0 / std::f64::consts::PI).sqrt() } else { 0.0 };
    }
    let log_pdf = (k - 1.0) * t.ln() - 0.5 * t * t - (0.5 * k - 1.0) * std::f64::consts::LN_2 - ln_gamma(0.5 * k);
    log_pdf.exp()
}

/// `P(V >= t)` for `V ~ chi_q`.
pub fn chi_sf(t: f64, q: usize) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    gamma_ur(0.5 * q as f64, 0.5 * t * t)
}

pub fn chisq_cdf(x: f64, q: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(0.5 * q as f64, 0.5 * x)
}

/// Chi-squared quantile by bisection on the regularized incomplete gamma.
pub fn chisq_quantile(p: f64, q: usize) -> f64 {
    assert!((0.0..1.0).contains(&p), "probability must lie in [0, 1), got {p}");
    if p == 0.0 {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = q as f64 + 10.0;
    while chisq_cdf(hi, q) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chisq_cdf(mid, q) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}
