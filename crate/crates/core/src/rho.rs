//! Bounded rho-functions.
//!
//! A rho-function is even, nondecreasing in `|u|`, zero at the origin and
//! saturates at 1. Each kernel also supplies its derivative `psi`, the IRWLS
//! weight `W(u) = psi(u) / u`, and the derivative of `t -> W(sqrt(t))` used by
//! the asymptotic covariance.

use serde::{Deserialize, Serialize};

/// Operations every bounded rho-function provides.
pub trait BoundedRho {
    fn rho(&self, u: f64) -> f64;
    fn psi(&self, u: f64) -> f64;
    /// `psi(u) / u`, continuously extended at zero.
    fn weight(&self, u: f64) -> f64;
    /// `d/dt W(sqrt(t))` for `t >= 0`.
    fn w1_prime(&self, t: f64) -> f64;
    /// Point beyond which the kernel is flat.
    fn saturation(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoFamily {
    /// Tukey's bisquare, `1 - (1 - u^2)^3` on `|u| <= 1`.
    Bisquare,
}

/// A rho-function family rescaled by a positive tuning constant: `rho(u / c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoKernel {
    pub family: RhoFamily,
    pub c: f64,
}

impl RhoKernel {
    pub fn bisquare(c: f64) -> Self {
        assert!(c > 0.0 && c.is_finite(), "tuning constant must be positive, got {c}");
        Self { family: RhoFamily::Bisquare, c }
    }
}

impl BoundedRho for RhoKernel {
    #[inline]
    fn rho(&self, u: f64) -> f64 {
        match self.family {
            RhoFamily::Bisquare => {
                let t = u / self.c;
                let t2 = t * t;
                if t2 >= 1.0 {
                    1.0
                } else {
                    let r = 1.0 - t2;
                    1.0 - r * r * r
                }
            }
        }
    }

    #[inline]
    fn psi(&self, u: f64) -> f64 {
        u * self.weight(u)
    }

    #[inline]
    fn weight(&self, u: f64) -> f64 {
        match self.family {
            RhoFamily::Bisquare => {
                let c2 = self.c * self.c;
                let t2 = u * u / c2;
                if t2 >= 1.0 {
                    0.0
                } else {
                    let r = 1.0 - t2;
                    6.0 / c2 * r * r
                }
            }
        }
    }

    #[inline]
    fn w1_prime(&self, t: f64) -> f64 {
        match self.family {
            RhoFamily::Bisquare => {
                let c2 = self.c * self.c;
                if t >= c2 {
                    0.0
                } else {
                    -12.0 / (c2 * c2) * (1.0 - t / c2)
                }
            }
        }
    }

    fn saturation(&self) -> f64 {
        self.c
    }
}
