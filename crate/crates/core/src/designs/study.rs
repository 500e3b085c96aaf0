use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    complete_bibd_spec, generate_layout, rcbd_spec, simulate_data_with, treatment_means, DesignLayout, BLOCK, TREATMENT,
};
use crate::error::{domain, Result};
use crate::lmm::{gls_estimate, reml_fit, ModelSpec, Sign};
use crate::rng::stream;
use crate::shrinkage::MeanVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Rcbd,
    Bibd,
}

impl std::fmt::Display for DesignKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DesignKind::Rcbd => "rcbd",
            DesignKind::Bibd => "bibd",
        })
    }
}

#[derive(Debug, Clone)]
pub struct MsepConfig {
    pub design: DesignKind,
    pub t: usize,
    /// Block size; ignored for RCBD.
    pub k: usize,
    /// Number of blocks.
    pub n: usize,
    pub sigma2_e: f64,
    /// Block-to-error variance ratios.
    pub rho: Vec<f64>,
    /// Ranges of the equally spaced treatment means.
    pub delta: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    /// BIBD layout; searched with `seed` when absent.
    pub layout: Option<DesignLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsepCell {
    pub design: DesignKind,
    pub rho: f64,
    pub delta: f64,
    pub reps: usize,
    pub msep_eblup: f64,
    pub msep_mle: f64,
    pub ratio: f64,
    /// Fits that stopped without meeting the convergence tolerances.
    #[serde(skip)]
    pub nonconverged: usize,
    /// Per-replicate mean squared prediction errors.
    #[serde(skip)]
    pub eblup_loss: Vec<f64>,
    #[serde(skip)]
    pub mle_loss: Vec<f64>,
}

/// `t` values from `-delta/2` to `delta/2`, endpoints included.
pub fn equally_spaced(t: usize, delta: f64) -> Vec<f64> {
    if t == 1 {
        return vec![0.0];
    }
    (0..t)
        .map(|i| -delta / 2.0 + delta * i as f64 / (t - 1) as f64)
        .collect()
}

/// EBLUP versus MLE prediction error of the treatment means over a grid of
/// block-variance ratios and treatment-mean ranges.
///
/// Replicate `i` draws from stream `(seed, i)` in every cell, so cells differ
/// only through `rho` and `delta`. The EBLUP is `mu_hat + u_treatment` from a
/// REML fit with treatments and blocks random. The MLE is the raw treatment
/// mean for an RCBD and the GLS estimate at the same REML components for a
/// BIBD.
pub fn msep_study(config: &MsepConfig) -> Result<Vec<MsepCell>> {
    if config.reps < 2 {
        return domain("need at least 2 replicates");
    }
    if !(config.sigma2_e > 0.0) {
        return domain("sigma2_e must be positive");
    }
    if config
        .rho
        .iter()
        .chain(&config.delta)
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return domain("rho and delta must be finite and nonnegative");
    }
    let layout = match (config.design, &config.layout) {
        (_, Some(layout)) => layout.clone(),
        (DesignKind::Rcbd, None) => generate_layout(&rcbd_spec(config.t, config.n)?, config.seed)?,
        (DesignKind::Bibd, None) => {
            if (config.n * config.k) % config.t != 0 {
                return Err(crate::Error::Infeasible(format!(
                    "{} blocks of size {} cannot replicate {} treatments equally",
                    config.n, config.k, config.t
                )));
            }
            let spec = complete_bibd_spec(config.t, config.k, config.n * config.k / config.t)?;
            generate_layout(&spec, config.seed)?
        }
    };
    let spec = *layout.spec();
    if spec.t != config.t || spec.n != config.n || (config.design == DesignKind::Bibd && spec.k != config.k) {
        return domain(format!("layout {spec:?} does not match the requested design"));
    }
    let model = ModelSpec::new([(TREATMENT, Sign::Plus), (BLOCK, Sign::Plus)])?;

    let mut cells = Vec::with_capacity(config.rho.len() * config.delta.len());
    for &rho in &config.rho {
        for &delta in &config.delta {
            let mu = MeanVector::new(equally_spaced(spec.t, delta))?;
            let sigma2_b = rho * config.sigma2_e;
            let reps: Vec<Result<(f64, f64, bool)>> = (0..config.reps)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = stream(config.seed, rep as u64);
                    replicate(&layout, &model, &mu, sigma2_b, config.sigma2_e, config.design, &mut rng)
                })
                .collect();
            let mut eblup_loss = Vec::with_capacity(config.reps);
            let mut mle_loss = Vec::with_capacity(config.reps);
            let mut nonconverged = 0;
            for r in reps {
                let (e, m, conv) = r?;
                eblup_loss.push(e);
                mle_loss.push(m);
                nonconverged += usize::from(!conv);
            }
            let msep_eblup = eblup_loss.iter().sum::<f64>() / config.reps as f64;
            let msep_mle = mle_loss.iter().sum::<f64>() / config.reps as f64;
            cells.push(MsepCell {
                design: config.design,
                rho,
                delta,
                reps: config.reps,
                msep_eblup,
                msep_mle,
                ratio: msep_eblup / msep_mle,
                nonconverged,
                eblup_loss,
                mle_loss,
            });
        }
    }
    Ok(cells)
}

fn replicate<R: Rng>(
    layout: &DesignLayout,
    model: &ModelSpec,
    mu: &MeanVector,
    sigma2_b: f64,
    sigma2_e: f64,
    design: DesignKind,
    rng: &mut R,
) -> Result<(f64, f64, bool)> {
    let t = mu.len();
    let table = simulate_data_with(layout, mu, sigma2_b, sigma2_e, rng)?;
    let fit = reml_fit(&table, model)?;
    let eblup: Vec<f64> = (1..=t)
        .map(|i| fit.mu_hat + fit.effect(TREATMENT, &i.to_string()).unwrap_or(0.0))
        .collect();
    let mle = match design {
        DesignKind::Rcbd => treatment_means(&table, t)?,
        DesignKind::Bibd => gls_estimate(&table, TREATMENT, BLOCK, fit.sigma2_e, fit.sigma2[BLOCK])?
            .estimate
            .into_vec(),
    };
    let loss = |est: &[f64]| est.iter().zip(mu.as_slice()).map(|(e, m)| (e - m).powi(2)).sum::<f64>() / t as f64;
    Ok((loss(&eblup), loss(&mle), fit.converged))
}

/// Percentile bootstrap interval for a cell's ratio, resampling replicates
/// in pairs.
pub fn bootstrap_ratio_band(cell: &MsepCell, n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    let n = cell.eblup_loss.len();
    if n < 2 || n_boot < 10 || !(0.0 < level && level < 1.0) {
        return domain("bootstrap needs >= 2 replicates, >= 10 resamples and a level in (0, 1)");
    }
    let mut ratios: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, b as u64);
            let (mut se, mut sm) = (0.0, 0.0);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                se += cell.eblup_loss[i];
                sm += cell.mle_loss[i];
            }
            se / sm
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| ratios[((q * (n_boot - 1) as f64).round() as usize).min(n_boot - 1)];
    Ok((at(tail), at(1.0 - tail)))
}

/// Writes the study grid as CSV, preceded by `# <comment>` when given.
pub fn write_study_csv<W: Write>(mut out: W, cells: &[MsepCell], comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    for cell in cells {
        w.serialize(cell)?;
    }
    w.flush()?;
    Ok(())
}
