use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Volatility band, exponents, dimension and horizon of a G-FBSDE problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GSetting {
    pub sigma_low: f64,
    pub sigma_high: f64,
    /// Solution exponent, `1 < p < beta`.
    pub p: f64,
    /// Integrability exponent of the coefficients.
    pub beta: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    /// Accept `sigma_low == sigma_high`; the problem is then a classical
    /// Brownian one with volatility `sigma_high`.
    #[serde(default)]
    pub classical: bool,
}

impl GSetting {
    pub fn new(sigma_low: f64, sigma_high: f64, p: f64, beta: f64, horizon: f64, x0: Vec<f64>) -> Self {
        GSetting {
            sigma_low,
            sigma_high,
            p,
            beta,
            horizon,
            x0,
            classical: false,
        }
    }

    /// Degenerate band `[s, s]`.
    pub fn classical(sigma: f64, p: f64, beta: f64, horizon: f64, x0: Vec<f64>) -> Self {
        GSetting {
            sigma_low: sigma,
            sigma_high: sigma,
            p,
            beta,
            horizon,
            x0,
            classical: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn gamma_low(&self) -> f64 {
        self.sigma_low * self.sigma_low
    }

    pub fn gamma_high(&self) -> f64 {
        self.sigma_high * self.sigma_high
    }

    /// The sublinear generator `G(a) = (sigma_high^2 a^+ - sigma_low^2 a^-) / 2`.
    pub fn generator(&self, a: f64) -> f64 {
        0.5 * (self.gamma_high() * a.max(0.0) - self.gamma_low() * (-a).max(0.0))
    }

    /// Volatilities the per-step supremum ranges over.
    pub fn extreme_vols(&self) -> Vec<f64> {
        if self.sigma_low == self.sigma_high {
            vec![self.sigma_high]
        } else {
            vec![self.sigma_low, self.sigma_high]
        }
    }

    pub fn with_x0(&self, x0: Vec<f64>) -> Self {
        GSetting { x0, ..self.clone() }
    }

    pub fn with_p(&self, p: f64) -> Self {
        GSetting { p, ..self.clone() }
    }

    pub fn with_horizon(&self, horizon: f64) -> Self {
        GSetting {
            horizon,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSetting(m));
        if !(self.sigma_low.is_finite() && self.sigma_high.is_finite()) {
            return bad("volatility bounds must be finite".into());
        }
        if self.sigma_low <= 0.0 {
            return bad(format!("sigma_low must be > 0, got {}", self.sigma_low));
        }
        if self.sigma_low > self.sigma_high {
            return bad(format!(
                "sigma_low ({}) exceeds sigma_high ({})",
                self.sigma_low, self.sigma_high
            ));
        }
        if self.sigma_low == self.sigma_high && !self.classical {
            return bad(
                "sigma_low == sigma_high requires the classical_reduction flag (the band must be non-degenerate)"
                    .into(),
            );
        }
        if self.sigma_low < self.sigma_high && self.classical {
            return bad("classical_reduction requires sigma_low == sigma_high".into());
        }
        if !(self.p > 1.0) {
            return bad(format!("p must be > 1, got {}", self.p));
        }
        if !(self.beta > self.p) {
            return bad(format!("beta ({}) must exceed p ({})", self.beta, self.p));
        }
        if self.x0.is_empty() {
            return bad("dimension n must be at least 1".into());
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return bad("x0 must be finite".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon T must be > 0, got {}", self.horizon));
        }
        Ok(())
    }
}
