//! Penalty families and their scalar operations.
//!
//! Each family provides the penalty value `p_lambda(t)` on `t >= 0` and the
//! closed-form minimizer of the univariate problem
//! `(1/2)(z - b)^2 + p_lambda(|b|)` used by the coordinate descent solver.
//! The hard-thresholding and L0 penalties keep each fitted coefficient either
//! exactly zero or above `lambda` in magnitude, which is what makes support
//! recovery clean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Penalty family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyFamily {
    /// Hard-thresholding penalty `(1/2)[lambda^2 - (lambda - t)_+^2]`.
    Hard,
    /// L0 penalty `(1/2) lambda^2 1{t != 0}`.
    L0,
    /// L1 penalty `lambda * t`.
    Lasso,
    /// Smoothly clipped absolute deviation with parameter `a`.
    Scad,
    /// Convex combination of L1 and ridge, `lambda [mix t + (1-mix) t^2 / 2]`.
    ElasticNet,
}

impl PenaltyFamily {
    /// True for families whose penalized objective is nonconvex and whose
    /// solver therefore uses multiple starts.
    pub fn is_nonconvex(self) -> bool {
        matches!(self, PenaltyFamily::Hard | PenaltyFamily::L0 | PenaltyFamily::Scad)
    }

    pub fn name(self) -> &'static str {
        match self {
            PenaltyFamily::Hard => "hard",
            PenaltyFamily::L0 => "l0",
            PenaltyFamily::Lasso => "lasso",
            PenaltyFamily::Scad => "scad",
            PenaltyFamily::ElasticNet => "elastic_net",
        }
    }
}

impl std::str::FromStr for PenaltyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(PenaltyFamily::Hard),
            "l0" => Ok(PenaltyFamily::L0),
            "lasso" => Ok(PenaltyFamily::Lasso),
            "scad" => Ok(PenaltyFamily::Scad),
            "elastic_net" | "enet" => Ok(PenaltyFamily::ElasticNet),
            other => Err(Error::input(format!("unknown penalty family `{other}`"))),
        }
    }
}

/// Full penalty configuration: family, regularization strength, family
/// parameters, the sup-norm box on factor coefficients, and the cap on the
/// joint support size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub family: PenaltyFamily,
    /// Regularization strength, `>= 0`.
    pub lambda: f64,
    /// SCAD shape parameter, `> 2`.
    pub scad_a: f64,
    /// Elastic-net mixing weight in `[0, 1]`; 1 is pure L1.
    pub enet_mix: f64,
    /// Sup-norm bound `T` on the factor coefficients.
    pub gamma_box_t: f64,
    /// Support cap `M`; fitted estimates keep fewer than `M/2` nonzeros.
    /// `None` derives `M = 2 n / log p` from the design at fit time.
    pub support_cap_m: Option<usize>,
}

pub const DEFAULT_SCAD_A: f64 = 3.7;
pub const DEFAULT_GAMMA_BOX: f64 = 50.0;

impl PenaltySpec {
    pub fn new(family: PenaltyFamily, lambda: f64) -> Result<Self> {
        let spec = PenaltySpec {
            family,
            lambda,
            scad_a: DEFAULT_SCAD_A,
            enet_mix: 0.5,
            gamma_box_t: DEFAULT_GAMMA_BOX,
            support_cap_m: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn hard(lambda: f64) -> Self {
        Self::new(PenaltyFamily::Hard, lambda).expect("nonnegative lambda")
    }

    pub fn l0(lambda: f64) -> Self {
        Self::new(PenaltyFamily::L0, lambda).expect("nonnegative lambda")
    }

    pub fn lasso(lambda: f64) -> Self {
        Self::new(PenaltyFamily::Lasso, lambda).expect("nonnegative lambda")
    }

    pub fn scad(lambda: f64) -> Self {
        Self::new(PenaltyFamily::Scad, lambda).expect("nonnegative lambda")
    }

    pub fn elastic_net(lambda: f64, mix: f64) -> Result<Self> {
        let mut spec = Self::new(PenaltyFamily::ElasticNet, lambda)?;
        spec.enet_mix = mix;
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_gamma_box(mut self, t: f64) -> Self {
        self.gamma_box_t = t;
        self
    }

    pub fn with_support_cap(mut self, m: usize) -> Self {
        self.support_cap_m = Some(m);
        self
    }

    pub fn with_scad_a(mut self, a: f64) -> Self {
        self.scad_a = a;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::input(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.scad_a > 2.0) {
            return Err(Error::input(format!("scad_a must be > 2, got {}", self.scad_a)));
        }
        if !(0.0..=1.0).contains(&self.enet_mix) {
            return Err(Error::input(format!("enet_mix must lie in [0, 1], got {}", self.enet_mix)));
        }
        if !(self.gamma_box_t > 0.0) {
            return Err(Error::input(format!("gamma_box_t must be > 0, got {}", self.gamma_box_t)));
        }
        if self.support_cap_m == Some(0) {
            return Err(Error::input("support_cap_m must be positive"));
        }
        Ok(())
    }

    /// Penalty value `p_lambda(t)` at `t >= 0`.
    pub fn penalty_value(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::input(format!("penalty argument must be >= 0, got {t}")));
        }
        let lambda = self.lambda;
        Ok(match self.family {
            PenaltyFamily::Hard => {
                let clipped = (lambda - t).max(0.0);
                0.5 * (lambda * lambda - clipped * clipped)
            }
            PenaltyFamily::L0 => {
                if t != 0.0 {
                    0.5 * lambda * lambda
                } else {
                    0.0
                }
            }
            PenaltyFamily::Lasso => lambda * t,
            PenaltyFamily::Scad => {
                let a = self.scad_a;
                if t <= lambda {
                    lambda * t
                } else if t <= a * lambda {
                    (2.0 * a * lambda * t - t * t - lambda * lambda) / (2.0 * (a - 1.0))
                } else {
                    lambda * lambda * (a + 1.0) / 2.0
                }
            }
            PenaltyFamily::ElasticNet => lambda * (self.enet_mix * t + (1.0 - self.enet_mix) * t * t / 2.0),
        })
    }

    /// Minimizer of `(1/2)(z - b)^2 + p_lambda(|b|)` over `b`, on the
    /// standardized (unit design-column) scale.
    ///
    /// Ties at `|z| = lambda` map to zero for the thresholding families, so
    /// nonzero coefficients strictly exceed `lambda` in magnitude.
    pub fn threshold_update(&self, z: f64) -> f64 {
        let lambda = self.lambda;
        match self.family {
            PenaltyFamily::Hard | PenaltyFamily::L0 => {
                if z.abs() > lambda {
                    z
                } else {
                    0.0
                }
            }
            PenaltyFamily::Lasso => soft_threshold(z, lambda),
            PenaltyFamily::Scad => {
                let a = self.scad_a;
                let abs = z.abs();
                if abs <= 2.0 * lambda {
                    soft_threshold(z, lambda)
                } else if abs <= a * lambda {
                    ((a - 1.0) * z - z.signum() * a * lambda) / (a - 2.0)
                } else {
                    z
                }
            }
            PenaltyFamily::ElasticNet => {
                soft_threshold(z, lambda * self.enet_mix) / (1.0 + lambda * (1.0 - self.enet_mix))
            }
        }
    }
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}
