//! Block designs: parameter identities, layout search and validation, data
//! simulation, the EBLUP-versus-MLE prediction study and a Monte-Carlo check
//! of shrinkage dominance under exchangeable correlation.

mod dominance;
mod layout;
mod search;
mod study;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{domain, Result};
use crate::lmm::ObservationTable;
use crate::shrinkage::MeanVector;

pub use dominance::{dominance_check, helmert, whitened_jsl, DominanceResult};
pub use layout::{complete_bibd_spec, rcbd_spec, BibdSpec, DesignLayout};
pub use search::{generate_layout, SEARCH_BUDGET};
pub use study::{bootstrap_ratio_band, equally_spaced, msep_study, write_study_csv, DesignKind, MsepCell, MsepConfig};

/// Factor names used in simulated tables.
pub const TREATMENT: &str = "treatment";
pub const BLOCK: &str = "block";

/// Covariance `a I + b J` of the treatment-mean vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginalCov {
    pub a: f64,
    pub b: f64,
}

pub fn marginal_cov(spec: &BibdSpec, sigma2_e: f64, sigma2_b: f64) -> Result<MarginalCov> {
    if !(sigma2_e > 0.0 && sigma2_b >= 0.0) {
        return domain("need sigma2_e > 0 and sigma2_b >= 0");
    }
    let r = spec.r as f64;
    let ratio = spec.lambda as f64 / r;
    Ok(MarginalCov {
        a: sigma2_e / r + (1.0 - ratio) * sigma2_b / r,
        b: ratio * sigma2_b / r,
    })
}

/// Simulates `y = mu_treatment + b_block + e` on `layout`.
///
/// Treatments are labelled `1..=t` and blocks `1..=n`. Each block draws its
/// effect and then its errors in layout order from one standard-normal
/// sequence, so changing a variance rescales the same draws.
pub fn simulate_data_with<R: Rng + ?Sized>(
    layout: &DesignLayout,
    mu: &MeanVector,
    sigma2_b: f64,
    sigma2_e: f64,
    rng: &mut R,
) -> Result<ObservationTable> {
    let spec = layout.spec();
    if mu.len() != spec.t {
        return domain(format!("mu has length {}, design has {} treatments", mu.len(), spec.t));
    }
    if !(sigma2_b >= 0.0 && sigma2_e >= 0.0) {
        return domain("variances must be nonnegative");
    }
    let (sb, se) = (sigma2_b.sqrt(), sigma2_e.sqrt());
    let mut table = ObservationTable::new([TREATMENT, BLOCK])?;
    for (j, block) in layout.blocks().iter().enumerate() {
        let b = sb * rng.sample::<f64, _>(StandardNormal);
        let label = (j + 1).to_string();
        for &i in block {
            let e = se * rng.sample::<f64, _>(StandardNormal);
            table.push(mu[i] + b + e, &[(i + 1).to_string().as_str(), label.as_str()])?;
        }
    }
    Ok(table)
}

pub fn simulate_data(
    layout: &DesignLayout,
    mu: &MeanVector,
    sigma2_b: f64,
    sigma2_e: f64,
    seed: u64,
) -> Result<ObservationTable> {
    simulate_data_with(layout, mu, sigma2_b, sigma2_e, &mut crate::rng::stream(seed, 0))
}

/// Per-treatment averages of a simulated table, in treatment order `1..=t`.
pub fn treatment_means(table: &ObservationTable, t: usize) -> Result<Vec<f64>> {
    let ti = table.factor_index(TREATMENT)?;
    let mut sum = vec![0.0; t];
    let mut cnt = vec![0usize; t];
    for row in 0..table.len() {
        let i: usize = table
            .level(row, ti)
            .parse()
            .ok()
            .filter(|&i| (1..=t).contains(&i))
            .ok_or_else(|| {
                crate::Error::Domain(format!("treatment label `{}` outside 1..={t}", table.level(row, ti)))
            })?;
        sum[i - 1] += table.responses()[row];
        cnt[i - 1] += 1;
    }
    Ok(sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect())
}
