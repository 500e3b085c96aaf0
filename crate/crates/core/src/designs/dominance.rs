use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Result};
use crate::rng::stream;
use crate::shrinkage::{covariance_shrink, jsl_estimate, MeanVector};

/// Orthogonal Helmert matrix: first row `1/sqrt(t)`, then successive contrasts.
pub fn helmert(t: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(t, t);
    let root = (t as f64).sqrt();
    for j in 0..t {
        h[(0, j)] = 1.0 / root;
    }
    for i in 1..t {
        let norm = ((i * (i + 1)) as f64).sqrt();
        for j in 0..i {
            h[(i, j)] = 1.0 / norm;
        }
        h[(i, i)] = -(i as f64) / norm;
    }
    h
}

/// `(aI + bJ)^power` through the Helmert eigenbasis, eigenvalues
/// `a + tb` (once) and `a` (t-1 times).
fn exchangeable_power(t: usize, a: f64, b: f64, power: f64) -> DMatrix<f64> {
    let h = helmert(t);
    let mut d = DVector::from_element(t, a.powf(power));
    d[0] = (a + t as f64 * b).powf(power);
    h.transpose() * DMatrix::from_diagonal(&d) * h
}

/// Whitens `ybar` with `(aI + bJ)^(-1/2)`, applies the grand-mean shrinker
/// with unit variance, and maps back with `(aI + bJ)^(1/2)`.
pub fn whitened_jsl(ybar: &MeanVector, a: f64, b: f64) -> Result<Vec<f64>> {
    let t = ybar.len();
    if !(a > 0.0 && b >= 0.0) {
        return domain("need a > 0 and b >= 0");
    }
    let y = DVector::from_column_slice(ybar.as_slice());
    let z = exchangeable_power(t, a, b, -0.5) * y;
    let shrunk = jsl_estimate(&MeanVector::new(z.iter().copied().collect())?, 1.0)?;
    let back = exchangeable_power(t, a, b, 0.5) * DVector::from_vec(shrunk.estimate);
    Ok(back.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceResult {
    pub reps: usize,
    /// Monte-Carlo mean of `||estimate - mu||^2` for the shrinker.
    pub mse_shrink: f64,
    pub mse_raw: f64,
    pub se_shrink: f64,
    pub se_raw: f64,
    /// Standard error of the paired difference `shrink - raw`.
    pub se_diff: f64,
}

impl DominanceResult {
    pub fn combined_se(&self) -> f64 {
        self.se_shrink.hypot(self.se_raw)
    }
}

/// Monte-Carlo risk of `covariance_shrink` against the raw means when
/// `ybar ~ N(mu, aI + bJ)`.
pub fn dominance_check(t: usize, a: f64, b: f64, mu: &MeanVector, reps: usize, seed: u64) -> Result<DominanceResult> {
    if t < 4 || mu.len() != t {
        return domain(format!("need t >= 4 and mu of length t; got t={t}, |mu|={}", mu.len()));
    }
    if !(a > 0.0 && b > 0.0) {
        return domain("need a > 0 and b > 0");
    }
    if reps < 1000 {
        return domain("need at least 1000 replicates");
    }
    let tf = t as f64;
    let (sa, sg) = (a.sqrt(), (a + tf * b).sqrt());
    let losses: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(seed, rep as u64);
            let z: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
            let zbar = z.iter().sum::<f64>() / tf;
            // (aI + bJ)^(1/2) z in the Helmert eigenbasis
            let y: Vec<f64> = z
                .iter()
                .zip(mu.as_slice())
                .map(|(zi, m)| m + sa * (zi - zbar) + sg * zbar)
                .collect();
            let raw: f64 = y.iter().zip(mu.as_slice()).map(|(v, m)| (v - m).powi(2)).sum();
            let est = covariance_shrink(&MeanVector::new(y).expect("finite draws"), a).expect("t >= 4");
            let shrink: f64 = est
                .estimate
                .iter()
                .zip(mu.as_slice())
                .map(|(v, m)| (v - m).powi(2))
                .sum();
            (shrink, raw)
        })
        .collect();
    let n = reps as f64;
    let stats = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let mean = losses.iter().map(f).sum::<f64>() / n;
        let var = losses.iter().map(|l| (f(l) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (mse_shrink, se_shrink) = stats(&|l| l.0);
    let (mse_raw, se_raw) = stats(&|l| l.1);
    let (_, se_diff) = stats(&|l| l.0 - l.1);
    Ok(DominanceResult {
        reps,
        mse_shrink,
        mse_raw,
        se_shrink,
        se_raw,
        se_diff,
    })
}
