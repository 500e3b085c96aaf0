use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Result};

/// Inverse-Gamma density with shape `alpha` and scale `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGamma {
    shape: f64,
    scale: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && scale.is_finite() && scale > 0.0) {
            return domain(format!(
                "inverse-Gamma needs finite positive shape and scale, got ({shape}, {scale})"
            ));
        }
        Ok(Self { shape, scale })
    }

    /// Posterior of `sigma2` under a `1/sigma2` prior when `x ~ sigma2 chi2_d / d`:
    /// shape `d/2`, scale `d x / 2`.
    pub fn from_scaled_chi2(x: f64, df: f64) -> Result<Self> {
        Self::new(df / 2.0, df * x / 2.0)
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mode(&self) -> f64 {
        self.scale / (self.shape + 1.0)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln() - self.scale / x
    }

    pub fn d_log_density(&self, x: f64) -> f64 {
        -(self.shape + 1.0) / x + self.scale / (x * x)
    }

    pub fn d2_log_density(&self, x: f64) -> f64 {
        (self.shape + 1.0) / (x * x) - 2.0 * self.scale / (x * x * x)
    }
}

/// Per-component priors; absent components are flat.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariancePrior {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<InverseGamma>,
    #[serde(default)]
    pub factors: BTreeMap<String, InverseGamma>,
}

impl VariancePrior {
    pub fn flat() -> Self {
        Self::default()
    }

    pub fn with_residual(mut self, prior: InverseGamma) -> Self {
        self.residual = Some(prior);
        self
    }

    pub fn with_factor(mut self, name: impl Into<String>, prior: InverseGamma) -> Self {
        self.factors.insert(name.into(), prior);
        self
    }

    pub fn is_flat(&self) -> bool {
        self.residual.is_none() && self.factors.is_empty()
    }
}
