//! Closed-form shrinkage estimators of a multivariate normal mean.
//!
//! Every estimator here has the affine form
//! `estimate = target + factor * (input - target)`, where the target is
//! either the zero vector or the grand-mean vector. Factors are reported
//! raw (they may be negative or exceed one); call
//! [`ShrinkageResult::positive_part`] to clamp to `[0, 1]`.
//!
//! Inputs whose data-dependent denominator is exactly zero do not error:
//! the result is the target and `degenerate` is set.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// A vector of treatment or sample means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanVector(Vec<f64>);

impl MeanVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return domain("mean vector must have at least one component");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("mean vector entries must be finite");
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for MeanVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for MeanVector {
    type Error = crate::Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageResult {
    pub estimate: Vec<f64>,
    pub shrink_factor: f64,
    pub target: Vec<f64>,
    /// The data-dependent denominator was exactly zero.
    pub degenerate: bool,
    input: Vec<f64>,
}

impl ShrinkageResult {
    fn build(input: &[f64], target: Vec<f64>, shrink_factor: f64, degenerate: bool) -> Self {
        let estimate = affine(input, &target, shrink_factor);
        Self {
            estimate,
            shrink_factor,
            target,
            degenerate,
            input: input.to_vec(),
        }
    }

    /// The vector that was shrunk.
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Clamp the factor to `[0, 1]` and recompute the estimate.
    pub fn positive_part(self) -> Self {
        let factor = self.shrink_factor.clamp(0.0, 1.0);
        Self::build(&self.input, self.target, factor, self.degenerate)
    }
}

fn affine(input: &[f64], target: &[f64], factor: f64) -> Vec<f64> {
    input.iter().zip(target).map(|(&y, &m)| m + factor * (y - m)).collect()
}

fn check_variance(v: f64, name: &str) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return domain(format!("{name} must be finite and nonnegative, got {v}"));
    }
    Ok(())
}

/// Shared core: `target + (1 - noise / (spread / divisor)) (input - target)`.
fn shrink_toward(input: &[f64], target: Vec<f64>, noise: f64, divisor: f64) -> ShrinkageResult {
    let spread: f64 = input.iter().zip(&target).map(|(&y, &m)| (y - m) * (y - m)).sum();
    if spread == 0.0 {
        let factor = if noise == 0.0 { 1.0 } else { 0.0 };
        return ShrinkageResult::build(input, target, factor, true);
    }
    let factor = 1.0 - noise / (spread / divisor);
    ShrinkageResult::build(input, target, factor, false)
}

/// James–Stein estimator shrinking toward zero.
pub fn js_estimate(ybar: &MeanVector, sigma2e_over_n: f64) -> Result<ShrinkageResult> {
    let t = ybar.len();
    if t < 3 {
        return domain(format!("James-Stein needs t >= 3, got t = {t}"));
    }
    check_variance(sigma2e_over_n, "sigma2e_over_n")?;
    Ok(shrink_toward(
        ybar.as_slice(),
        vec![0.0; t],
        sigma2e_over_n,
        (t - 2) as f64,
    ))
}

/// Lindley's modification: shrink toward the grand mean.
pub fn jsl_estimate(ybar: &MeanVector, sigma2e_over_n: f64) -> Result<ShrinkageResult> {
    let t = ybar.len();
    if t < 4 {
        return domain(format!("James-Stein-Lindley needs t >= 4, got t = {t}"));
    }
    check_variance(sigma2e_over_n, "sigma2e_over_n")?;
    Ok(shrink_toward(
        ybar.as_slice(),
        vec![ybar.mean(); t],
        sigma2e_over_n,
        (t - 3) as f64,
    ))
}

/// Grand-mean shrinkage for `ybar ~ N(mu, a I + b J)`; only `a` enters.
pub fn covariance_shrink(ybar: &MeanVector, a: f64) -> Result<ShrinkageResult> {
    if !(a.is_finite() && a > 0.0) {
        return domain(format!("a must be positive, got {a}"));
    }
    jsl_estimate(ybar, a)
}

/// How the error variance is estimated from a complete t x n table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorVarianceMode {
    /// Pooled within-row variance, divisor t(n-1).
    WithinRows,
    /// Row-by-column interaction (double-centered), divisor (t-1)(n-1).
    Interaction,
}

fn check_complete(y: &DMatrix<f64>) -> Result<()> {
    if y.nrows() == 0 || y.ncols() == 0 {
        return domain("data table is empty");
    }
    if y.iter().any(|v| !v.is_finite()) {
        return domain(
            "data table is incomplete or has non-finite cells; incomplete-block data must be fitted as a mixed model",
        );
    }
    Ok(())
}

/// Row means of a complete table.
pub fn row_means(y: &DMatrix<f64>) -> Vec<f64> {
    let n = y.ncols() as f64;
    y.row_iter().map(|r| r.sum() / n).collect()
}

/// Unbiased estimate of the error variance from a complete table (rows are treatments).
pub fn error_variance(y: &DMatrix<f64>, mode: ErrorVarianceMode) -> Result<f64> {
    check_complete(y)?;
    let (t, n) = y.shape();
    let rows = row_means(y);
    match mode {
        ErrorVarianceMode::WithinRows => {
            if n < 2 {
                return domain("within-row variance needs n >= 2 columns");
            }
            let ss: f64 = (0..t)
                .map(|i| (0..n).map(|j| (y[(i, j)] - rows[i]).powi(2)).sum::<f64>())
                .sum();
            Ok(ss / (t * (n - 1)) as f64)
        }
        ErrorVarianceMode::Interaction => {
            if t < 2 || n < 2 {
                return domain("interaction variance needs t >= 2 and n >= 2");
            }
            let cols: Vec<f64> = y.column_iter().map(|c| c.sum() / t as f64).collect();
            let grand = rows.iter().sum::<f64>() / t as f64;
            let mut ss = 0.0;
            for i in 0..t {
                for j in 0..n {
                    let r = y[(i, j)] - rows[i] - cols[j] + grand;
                    ss += r * r;
                }
            }
            Ok(ss / ((t - 1) * (n - 1)) as f64)
        }
    }
}

/// Shrinkage target of the empirical Bayes estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EbCenter {
    Zero,
    GrandMean,
}

/// Empirical Bayes estimate from a complete table, with the unbiased
/// moment estimate of the marginal variance (`S0/t` or `S/(t-1)`).
pub fn eb_estimate(y: &DMatrix<f64>, center: EbCenter) -> Result<ShrinkageResult> {
    check_complete(y)?;
    let (t, n) = y.shape();
    if n < 2 {
        return domain("empirical Bayes estimate needs n >= 2 columns");
    }
    let ybar = row_means(y);
    let noise = error_variance(y, ErrorVarianceMode::WithinRows)? / n as f64;
    match center {
        EbCenter::Zero => Ok(shrink_toward(&ybar, vec![0.0; t], noise, t as f64)),
        EbCenter::GrandMean => {
            if t < 2 {
                return domain("grand-mean centering needs t >= 2");
            }
            let grand = ybar.iter().sum::<f64>() / t as f64;
            Ok(shrink_toward(&ybar, vec![grand; t], noise, (t - 1) as f64))
        }
    }
}
