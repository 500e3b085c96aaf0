use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::table::ObservationTable;
use crate::error::{domain, Error, Result};
use crate::shrinkage::MeanVector;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlsEstimate {
    /// Treatment labels in natural order.
    pub labels: Vec<String>,
    pub estimate: MeanVector,
}

/// GLS estimate of the treatment means in `y = mu_treatment + b_block + e`
/// with known `sigma2_e` and `sigma2_b`, assembled block by block from
/// `M_j' (sigma2_e I + sigma2_b J)^-1 M_j`.
pub fn gls_estimate(
    table: &ObservationTable,
    treatment: &str,
    block: &str,
    sigma2_e: f64,
    sigma2_b: f64,
) -> Result<GlsEstimate> {
    if !(sigma2_e.is_finite() && sigma2_e > 0.0) {
        return domain("sigma2_e must be positive");
    }
    if !(sigma2_b.is_finite() && sigma2_b >= 0.0) {
        return domain("sigma2_b must be nonnegative");
    }
    let ti = table.factor_index(treatment)?;
    let bi = table.factor_index(block)?;
    let labels = table.levels_of(ti);
    let t = labels.len();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let mut blocks: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for row in 0..table.len() {
        blocks
            .entry(table.level(row, bi))
            .or_default()
            .push((index[table.level(row, ti)], table.responses()[row]));
    }
    check_connected(&labels, blocks.values())?;

    let mut info = DMatrix::<f64>::zeros(t, t);
    let mut rhs = DVector::<f64>::zeros(t);
    for obs in blocks.values() {
        // (s2e I + s2b J)^-1 = (I - g J) / s2e with g = s2b / (s2e + k s2b)
        let k = obs.len() as f64;
        let g = sigma2_b / (sigma2_e + k * sigma2_b);
        let ysum: f64 = obs.iter().map(|(_, y)| y).sum();
        for &(i, yi) in obs {
            rhs[i] += (yi - g * ysum) / sigma2_e;
            for &(j, _) in obs {
                info[(i, j)] -= g / sigma2_e;
            }
            info[(i, i)] += 1.0 / sigma2_e;
        }
    }
    let chol = info
        .cholesky()
        .ok_or_else(|| Error::Singular("GLS information matrix is not positive definite".into()))?;
    let est = chol.solve(&rhs);
    Ok(GlsEstimate {
        labels,
        estimate: MeanVector::new(est.iter().copied().collect())?,
    })
}

fn check_connected<'a>(labels: &[String], blocks: impl Iterator<Item = &'a Vec<(usize, f64)>>) -> Result<()> {
    let t = labels.len();
    let mut parent: Vec<usize> = (0..t).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for obs in blocks {
        let first = obs[0].0;
        for &(j, _) in &obs[1..] {
            let (a, b) = (find(&mut parent, first), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in 0..t {
        let r = find(&mut parent, i);
        comps.entry(r).or_default().push(labels[i].clone());
    }
    if comps.len() > 1 {
        return Err(Error::Disconnected {
            components: comps.into_values().collect(),
        });
    }
    Ok(())
}
