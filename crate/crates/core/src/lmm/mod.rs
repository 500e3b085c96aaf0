//! Gaussian linear mixed models with one fixed intercept and independent
//! random factors: REML and MAP fitting, BLUP extraction, and GLS with known
//! variance components.

mod engine;
mod gls;
mod prior;
mod table;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::shrinkage::{row_means, MeanVector};
use engine::MixedModel;

pub use gls::{gls_estimate, GlsEstimate};
pub use prior::{InverseGamma, VariancePrior};
pub use table::{natural_cmp, ObservationTable};

/// JSON key used for the residual component in `sigma2` maps.
pub const RESIDUAL: &str = "residual";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomFactor {
    pub name: String,
    pub sign: Sign,
}

/// Intercept plus an ordered list of random factors, each entering with a sign.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    factors: Vec<RandomFactor>,
}

impl ModelSpec {
    pub fn intercept_only() -> Self {
        Self::default()
    }

    pub fn new<S: Into<String>>(factors: impl IntoIterator<Item = (S, Sign)>) -> Result<Self> {
        let mut spec = Self::default();
        for (name, sign) in factors {
            spec = spec.with(name, sign)?;
        }
        Ok(spec)
    }

    /// Append a factor.
    pub fn with(mut self, name: impl Into<String>, sign: Sign) -> Result<Self> {
        let name = name.into();
        if name == RESIDUAL {
            return domain(format!("`{RESIDUAL}` is reserved for the error component"));
        }
        if self.factors.iter().any(|f| f.name == name) {
            return domain(format!("factor `{name}` declared twice"));
        }
        self.factors.push(RandomFactor { name, sign });
        Ok(self)
    }

    pub fn factors(&self) -> &[RandomFactor] {
        &self.factors
    }
}

/// Residual variance and one variance per random factor, in `ModelSpec` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub residual: f64,
    pub factors: Vec<f64>,
}

impl VarianceComponents {
    pub fn new(residual: f64, factors: Vec<f64>) -> Self {
        Self { residual, factors }
    }

    fn to_theta(&self) -> Vec<f64> {
        std::iter::once(self.residual)
            .chain(self.factors.iter().copied())
            .collect()
    }
}

/// Fitted model: intercept, variance components and per-level predicted effects.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub mu_hat: f64,
    pub sigma2_e: f64,
    /// Variance of each random factor.
    pub sigma2: BTreeMap<String, f64>,
    /// `effects[factor][level]`: the EBLUP of that level's random effect.
    pub effects: BTreeMap<String, BTreeMap<String, f64>>,
    /// Restricted log-likelihood at the optimum (prior terms excluded).
    pub criterion: f64,
    /// Criterion plus log prior density, for MAP fits.
    pub log_posterior: Option<f64>,
    pub converged: bool,
    pub n_iter: usize,
    /// Components that ended on their lower bound.
    pub boundary: Vec<String>,
}

impl FitResult {
    pub fn effect(&self, factor: &str, level: &str) -> Option<f64> {
        self.effects.get(factor)?.get(level).copied()
    }

    pub fn components(&self, spec: &ModelSpec) -> VarianceComponents {
        VarianceComponents::new(
            self.sigma2_e,
            spec.factors()
                .iter()
                .map(|f| self.sigma2.get(&f.name).copied().unwrap_or(0.0))
                .collect(),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct FitJson {
    mu_hat: f64,
    sigma2: BTreeMap<String, f64>,
    effects: BTreeMap<String, BTreeMap<String, f64>>,
    criterion: f64,
    converged: bool,
    #[serde(default)]
    n_iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_posterior: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    boundary: Vec<String>,
}

impl Serialize for FitResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut sigma2 = self.sigma2.clone();
        sigma2.insert(RESIDUAL.to_string(), self.sigma2_e);
        FitJson {
            mu_hat: self.mu_hat,
            sigma2,
            effects: self.effects.clone(),
            criterion: self.criterion,
            converged: self.converged,
            n_iter: self.n_iter,
            log_posterior: self.log_posterior,
            boundary: self.boundary.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FitResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let mut j = FitJson::deserialize(d)?;
        let sigma2_e = j
            .sigma2
            .remove(RESIDUAL)
            .ok_or_else(|| serde::de::Error::missing_field("sigma2.residual"))?;
        Ok(FitResult {
            mu_hat: j.mu_hat,
            sigma2_e,
            sigma2: j.sigma2,
            effects: j.effects,
            criterion: j.criterion,
            log_posterior: j.log_posterior,
            converged: j.converged,
            n_iter: j.n_iter,
            boundary: j.boundary,
        })
    }
}

/// Restricted log-likelihood `-1/2 [log|V| + log|X'V^-1 X| + y'Py]` (no `2 pi` constant).
pub fn restricted_loglik(table: &ObservationTable, spec: &ModelSpec, theta: &VarianceComponents) -> Result<f64> {
    if theta.factors.len() != spec.factors().len() {
        return domain("one variance per random factor is required");
    }
    if !(theta.residual > 0.0) {
        return domain("residual variance must be positive");
    }
    if theta.factors.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return domain("factor variances must be finite and nonnegative");
    }
    let model = MixedModel::new(table, spec)?;
    model
        .evaluate(&theta.to_theta(), false)
        .map(|e| e.loglik)
        .ok_or_else(|| Error::Singular("X'V^-1 X is not positive".into()))
}

/// REML fit of the variance components, with EBLUPs at the optimum.
pub fn reml_fit(table: &ObservationTable, spec: &ModelSpec) -> Result<FitResult> {
    let model = MixedModel::new(table, spec)?;
    check_fit_preconditions(&model, false)?;
    let priors = vec![None; model.n_params()];
    Ok(fit_model(&model, &priors))
}

/// MAP fit: maximizes the restricted likelihood times inverse-Gamma priors.
pub fn map_fit(table: &ObservationTable, spec: &ModelSpec, prior: &VariancePrior) -> Result<FitResult> {
    let model = MixedModel::new(table, spec)?;
    for name in prior.factors.keys() {
        if !spec.factors().iter().any(|f| &f.name == name) {
            return domain(format!("prior given for undeclared factor `{name}`"));
        }
    }
    let priors: Vec<Option<InverseGamma>> = std::iter::once(prior.residual)
        .chain(spec.factors().iter().map(|f| prior.factors.get(&f.name).copied()))
        .collect();
    check_fit_preconditions(&model, priors.iter().all(Option::is_some))?;
    Ok(fit_model(&model, &priors))
}

fn check_fit_preconditions(model: &MixedModel, fully_informative: bool) -> Result<()> {
    for f in &model.factors {
        if f.labels.len() < 2 {
            return domain(format!("factor `{}` needs at least 2 levels", f.name));
        }
    }
    // A proper prior on every component keeps the posterior proper even
    // without residual degrees of freedom.
    if model.n < 2 && !fully_informative {
        return domain("at least one residual degree of freedom is required");
    }
    Ok(())
}

fn fit_model(model: &MixedModel, priors: &[Option<InverseGamma>]) -> FitResult {
    let var = model.sample_variance();
    let base = if var > 0.0 { var } else { 1.0 };
    let floor = 1e-10 * base;
    let m = model.n_params();
    let lower: Vec<f64> = (0..m)
        .map(|i| if i == 0 || priors[i].is_some() { floor } else { 0.0 })
        .collect();
    let flat = priors.iter().all(Option::is_none);

    if var == 0.0 && flat {
        let theta: Vec<f64> = lower.clone();
        return assemble(model, &theta, &lower, priors, true, 0);
    }

    let moments = model.oneway_moments();
    let min_start = 1e-3 * base;
    let resid_start = moments
        .iter()
        .filter_map(|(_, msw)| *msw)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
        .unwrap_or(base);
    let mut start = vec![resid_start.max(min_start)];
    start.extend(moments.iter().map(|(s2, _)| s2.max(min_start)));

    let opt = engine::maximize(model, start, &lower, priors);
    assemble(model, &opt.theta, &lower, priors, opt.converged, opt.n_iter)
}

fn assemble(
    model: &MixedModel,
    theta: &[f64],
    lower: &[f64],
    priors: &[Option<InverseGamma>],
    converged: bool,
    n_iter: usize,
) -> FitResult {
    let ev = model
        .evaluate(theta, false)
        .expect("optimizer only visits evaluable points");
    let mut sigma2 = BTreeMap::new();
    let mut effects = BTreeMap::new();
    let mut boundary = Vec::new();
    if theta[0] <= lower[0] {
        boundary.push(RESIDUAL.to_string());
    }
    for (k, f) in model.factors.iter().enumerate() {
        sigma2.insert(f.name.clone(), theta[1 + k]);
        if theta[1 + k] <= lower[1 + k] {
            boundary.push(f.name.clone());
        }
        let lv: BTreeMap<String, f64> = f
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), ev.u[f.offset + i]))
            .collect();
        effects.insert(f.name.clone(), lv);
    }
    let log_posterior = priors.iter().any(Option::is_some).then(|| {
        ev.loglik
            + theta
                .iter()
                .zip(priors)
                .filter_map(|(&t, p)| p.map(|p| p.log_density(t)))
                .sum::<f64>()
    });
    FitResult {
        mu_hat: ev.beta,
        sigma2_e: theta[0],
        sigma2,
        effects,
        criterion: ev.loglik,
        log_posterior,
        converged,
        n_iter,
        boundary,
    }
}

/// Closed-form REML for a complete balanced one-way table (rows are groups).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnewayReml {
    pub mu_hat: f64,
    pub sigma2_e: f64,
    pub sigma2_u: f64,
}

/// ANOVA estimates `MSE` and `(MSB - MSE)/n`; when `MSB < MSE` the group
/// variance is 0 and the residual variance is the boundary REML solution
/// `SST / (tn - 1)`.
pub fn balanced_oneway_reml(y: &DMatrix<f64>) -> Result<OnewayReml> {
    let (t, n) = y.shape();
    if t < 2 || n < 2 {
        return domain("balanced one-way REML needs t >= 2 and n >= 2");
    }
    if y.iter().any(|v| !v.is_finite()) {
        return domain("table must be complete");
    }
    let rows = row_means(y);
    let grand = rows.iter().sum::<f64>() / t as f64;
    let ssb: f64 = rows.iter().map(|m| n as f64 * (m - grand).powi(2)).sum();
    let ssw: f64 = (0..t)
        .map(|i| (0..n).map(|j| (y[(i, j)] - rows[i]).powi(2)).sum::<f64>())
        .sum();
    let msb = ssb / (t - 1) as f64;
    let mse = ssw / (t * (n - 1)) as f64;
    let (sigma2_e, sigma2_u) = if msb >= mse {
        (mse, (msb - mse) / n as f64)
    } else {
        ((ssb + ssw) / (t * n - 1) as f64, 0.0)
    };
    Ok(OnewayReml {
        mu_hat: grand,
        sigma2_e,
        sigma2_u,
    })
}

/// Long-format table for a t x n one-way layout; factor `group`, levels `1..=t`.
pub fn oneway_table(y: &DMatrix<f64>) -> Result<ObservationTable> {
    let mut table = ObservationTable::new(["group"])?;
    for i in 0..y.nrows() {
        let label = (i + 1).to_string();
        for j in 0..y.ncols() {
            table.push(y[(i, j)], &[label.as_str()])?;
        }
    }
    Ok(table)
}

/// BLUP of `1 mu + u` with known components.
pub fn blup_closed_form(ybar: &MeanVector, mu_bar: f64, sigma2_u: f64, sigma2e_over_n: f64) -> Result<MeanVector> {
    if !(sigma2_u >= 0.0 && sigma2e_over_n >= 0.0) {
        return domain("variances must be nonnegative");
    }
    let denom = sigma2_u + sigma2e_over_n;
    if denom == 0.0 {
        return Ok(ybar.clone());
    }
    let factor = 1.0 - sigma2e_over_n / denom;
    MeanVector::new(ybar.as_slice().iter().map(|y| mu_bar + factor * (y - mu_bar)).collect())
}

#[cfg(test)]
mod tests;
