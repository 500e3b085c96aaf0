//! Dense evaluation of the restricted log-likelihood and its derivatives.
//!
//! The model is `y = 1 mu + sum_k s_k Z_k u_k + e` with
//! `V = s2e I + sum_k s2_k Z_k Z_k'`. All work is done in the dimension of the
//! stacked random-effect columns `q` through the Woodbury identity
//! `V^-1 = (I - Z K Z') / s2e` with `K = L A^-1 L`, `L = diag(sqrt(s2_k / s2e))`
//! and `A = I + L Z'Z L`. This form stays well defined when a component is 0.

use nalgebra::{DMatrix, DVector};

use super::prior::InverseGamma;
use super::table::ObservationTable;
use super::ModelSpec;
use crate::error::{domain, Result};

pub(crate) struct FactorDesign {
    pub name: String,
    pub sign: f64,
    pub offset: usize,
    pub labels: Vec<String>,
}

pub(crate) struct MixedModel {
    pub n: usize,
    pub y: Vec<f64>,
    pub factors: Vec<FactorDesign>,
    pub q: usize,
    /// Column of each observation for each factor (absolute column index).
    cols: Vec<Vec<usize>>,
    gram: DMatrix<f64>,
    z1: DVector<f64>,
    zy: DVector<f64>,
    yy: f64,
    sum_y: f64,
}

/// Value, BLUPs and (optionally) derivatives at one parameter vector.
pub(crate) struct Eval {
    pub loglik: f64,
    pub beta: f64,
    pub u: DVector<f64>,
    pub grad: Option<Derivatives>,
}

pub(crate) struct Derivatives {
    pub gradient: DVector<f64>,
    /// Expected information, `tr(P V_i P V_j) / 2`.
    pub fisher: DMatrix<f64>,
    /// Negative Hessian of the criterion.
    pub observed: DMatrix<f64>,
}

impl MixedModel {
    pub fn new(table: &ObservationTable, spec: &ModelSpec) -> Result<Self> {
        if table.is_empty() {
            return domain("observation table is empty");
        }
        let n = table.len();
        let mut factors = Vec::with_capacity(spec.factors().len());
        let mut offset = 0;
        let mut cols = vec![Vec::with_capacity(spec.factors().len()); n];
        for f in spec.factors() {
            let idx = table.factor_index(&f.name)?;
            let labels = table.levels_of(idx);
            for (row, c) in cols.iter_mut().enumerate() {
                let lvl = table.level(row, idx);
                let pos = labels
                    .binary_search_by(|l| super::table::natural_cmp(l, lvl))
                    .expect("level present");
                c.push(offset + pos);
            }
            let width = labels.len();
            factors.push(FactorDesign {
                name: f.name.clone(),
                sign: f.sign.value(),
                offset,
                labels,
            });
            offset += width;
        }
        let q = offset;
        let y = table.responses().to_vec();
        let signs: Vec<f64> = factors.iter().map(|f| f.sign).collect();
        let mut gram = DMatrix::zeros(q, q);
        let mut z1 = DVector::zeros(q);
        let mut zy = DVector::zeros(q);
        for (row, c) in cols.iter().enumerate() {
            for (k, &ck) in c.iter().enumerate() {
                z1[ck] += signs[k];
                zy[ck] += signs[k] * y[row];
                for (l, &cl) in c.iter().enumerate() {
                    gram[(ck, cl)] += signs[k] * signs[l];
                }
            }
        }
        let yy = y.iter().map(|v| v * v).sum();
        let sum_y = y.iter().sum();
        Ok(Self {
            n,
            y,
            factors,
            q,
            cols,
            gram,
            z1,
            zy,
            yy,
            sum_y,
        })
    }

    pub fn n_params(&self) -> usize {
        1 + self.factors.len()
    }

    fn factor_of_col(&self) -> Vec<usize> {
        let mut out = vec![0; self.q];
        for (k, f) in self.factors.iter().enumerate() {
            for c in 0..f.labels.len() {
                out[f.offset + c] = k;
            }
        }
        out
    }

    /// Signed `Z' w`.
    fn zt(&self, w: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.q);
        for (row, c) in self.cols.iter().enumerate() {
            for (k, &ck) in c.iter().enumerate() {
                out[ck] += self.factors[k].sign * w[row];
            }
        }
        out
    }

    /// Signed `Z v`.
    fn z(&self, v: &DVector<f64>) -> Vec<f64> {
        self.cols
            .iter()
            .map(|c| c.iter().enumerate().map(|(k, &ck)| self.factors[k].sign * v[ck]).sum())
            .collect()
    }

    pub fn sample_variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let mean = self.sum_y / self.n as f64;
        self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (self.n - 1) as f64
    }

    /// Per-factor one-way ANOVA moment estimates `(sigma2_k, within-group MS)`.
    pub fn oneway_moments(&self) -> Vec<(f64, Option<f64>)> {
        let n = self.n as f64;
        let mean = self.sum_y / n;
        self.factors
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let g = f.labels.len();
                let mut counts = vec![0.0; g];
                let mut sums = vec![0.0; g];
                for (row, c) in self.cols.iter().enumerate() {
                    let l = c[k] - f.offset;
                    counts[l] += 1.0;
                    sums[l] += self.y[row];
                }
                let ssb: f64 = (0..g)
                    .filter(|&l| counts[l] > 0.0)
                    .map(|l| counts[l] * (sums[l] / counts[l] - mean).powi(2))
                    .sum();
                let sst: f64 = self.y.iter().map(|v| (v - mean).powi(2)).sum();
                let ssw = (sst - ssb).max(0.0);
                let msw = (self.n > g).then(|| ssw / (self.n - g) as f64);
                let s2 = if g > 1 {
                    let msb = ssb / (g - 1) as f64;
                    let n0 = (n - counts.iter().map(|c| c * c).sum::<f64>() / n) / (g - 1) as f64;
                    ((msb - msw.unwrap_or(0.0)) / n0).max(0.0)
                } else {
                    0.0
                };
                (s2, msw)
            })
            .collect()
    }

    fn solve_parts(&self, theta: &[f64]) -> Option<(DMatrix<f64>, f64)> {
        let s0 = theta[0];
        let fac = self.factor_of_col();
        let l: Vec<f64> = (0..self.q).map(|c| (theta[1 + fac[c]] / s0).sqrt()).collect();
        if self.q == 0 {
            return Some((DMatrix::zeros(0, 0), 0.0));
        }
        let mut a = DMatrix::from_fn(self.q, self.q, |i, j| l[i] * self.gram[(i, j)] * l[j]);
        for i in 0..self.q {
            a[(i, i)] += 1.0;
        }
        let chol = a.cholesky()?;
        let logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ainv = chol.inverse();
        let k = DMatrix::from_fn(self.q, self.q, |i, j| l[i] * ainv[(i, j)] * l[j]);
        Some((k, logdet_a))
    }

    pub fn evaluate(&self, theta: &[f64], with_derivatives: bool) -> Option<Eval> {
        debug_assert_eq!(theta.len(), self.n_params());
        let s0 = theta[0];
        if !(s0 > 0.0) || theta.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return None;
        }
        let n = self.n as f64;
        let (k, logdet_a) = self.solve_parts(theta)?;
        let kz1 = &k * &self.z1;
        let kzy = &k * &self.zy;
        let c = (n - self.z1.dot(&kz1)) / s0;
        if !(c > 0.0) {
            return None;
        }
        let b1y = (self.sum_y - self.z1.dot(&kzy)) / s0;
        let yvy = (self.yy - self.zy.dot(&kzy)) / s0;
        let beta = b1y / c;
        let ypy = yvy - b1y * b1y / c;
        let loglik = -0.5 * (n * s0.ln() + logdet_a + c.ln() + ypy);
        if !loglik.is_finite() {
            return None;
        }
        let u = &kzy - &kz1 * beta;
        let grad = with_derivatives.then(|| self.derivatives(theta, &k, c, beta));
        Some(Eval { loglik, beta, u, grad })
    }

    fn apply_vinv(&self, k: &DMatrix<f64>, s0: f64, w: &[f64]) -> Vec<f64> {
        let t = k * self.zt(w);
        let zt = self.z(&t);
        w.iter().zip(zt).map(|(wi, zi)| (wi - zi) / s0).collect()
    }

    fn derivatives(&self, theta: &[f64], k: &DMatrix<f64>, c: f64, beta: f64) -> Derivatives {
        let s0 = theta[0];
        let n = self.n as f64;
        let m = self.n_params();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        let ones = vec![1.0; self.n];
        let a = self.apply_vinv(k, s0, &ones);
        let resid: Vec<f64> = self.y.iter().map(|v| v - beta).collect();
        let r = self.apply_vinv(k, s0, &resid);
        let p_apply = |w: &[f64]| -> Vec<f64> {
            let vw = self.apply_vinv(k, s0, w);
            let aw = dot(&a, w) / c;
            vw.iter().zip(&a).map(|(x, ai)| x - ai * aw).collect()
        };

        let kg = k * &self.gram;
        let tr_kg = kg.trace();
        let aa = dot(&a, &a);
        let tr_p = (n - tr_kg) / s0 - aa / c;

        let zta = self.zt(&a);
        let ztvz = (&self.gram - &self.gram * &kg) / s0;
        let ztpz = &ztvz - &zta * zta.transpose() / c;
        let ztr = self.zt(&r);

        let mut gradient = DVector::zeros(m);
        gradient[0] = -0.5 * tr_p + 0.5 * dot(&r, &r);
        let blocks: Vec<std::ops::Range<usize>> = self
            .factors
            .iter()
            .map(|f| f.offset..f.offset + f.labels.len())
            .collect();
        for (kf, blk) in blocks.iter().enumerate() {
            let tr: f64 = blk.clone().map(|cc| ztpz[(cc, cc)]).sum();
            let ss: f64 = blk.clone().map(|cc| ztr[cc] * ztr[cc]).sum();
            gradient[1 + kf] = -0.5 * tr + 0.5 * ss;
        }

        let mut fisher = DMatrix::zeros(m, m);
        for (i, bi) in blocks.iter().enumerate() {
            for (j, bj) in blocks.iter().enumerate() {
                let mut s = 0.0;
                for ci in bi.clone() {
                    for cj in bj.clone() {
                        s += ztpz[(ci, cj)].powi(2);
                    }
                }
                fisher[(1 + i, 1 + j)] = 0.5 * s;
            }
        }
        // P Z, row by row: (Z - Z K G) / s0 - a (Z'a)' / c
        let mut col_norms = vec![0.0; self.q];
        for (row, cols) in self.cols.iter().enumerate() {
            for cc in 0..self.q {
                let mut v = 0.0;
                for (kf, &ck) in cols.iter().enumerate() {
                    let sgn = self.factors[kf].sign;
                    if ck == cc {
                        v += sgn;
                    }
                    v -= sgn * kg[(ck, cc)];
                }
                let val = v / s0 - a[row] * zta[cc] / c;
                col_norms[cc] += val * val;
            }
        }
        for (kf, blk) in blocks.iter().enumerate() {
            let s: f64 = blk.clone().map(|cc| col_norms[cc]).sum();
            fisher[(0, 1 + kf)] = 0.5 * s;
            fisher[(1 + kf, 0)] = 0.5 * s;
        }
        let tr_kgkg = (&kg * &kg).trace();
        let va = self.apply_vinv(k, s0, &a);
        let tr_v2 = (n - 2.0 * tr_kg + tr_kgkg) / (s0 * s0);
        let tr_p2 = tr_v2 - 2.0 * dot(&a, &va) / c + aa * aa / (c * c);
        fisher[(0, 0)] = 0.5 * tr_p2;

        // y'P V_i P V_j P y = w_i' P w_j
        let mut ws: Vec<Vec<f64>> = Vec::with_capacity(m);
        ws.push(r.clone());
        for (kf, f) in self.factors.iter().enumerate() {
            let w: Vec<f64> = self.cols.iter().map(|cols| f.sign * ztr[cols[kf]]).collect();
            ws.push(w);
        }
        let pws: Vec<Vec<f64>> = ws.iter().map(|w| p_apply(w)).collect();
        let mut observed = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let q = 0.5 * (dot(&ws[i], &pws[j]) + dot(&ws[j], &pws[i]));
                observed[(i, j)] = q - fisher[(i, j)];
            }
        }
        Derivatives {
            gradient,
            fisher,
            observed,
        }
    }
}

/// Outcome of the bounded ascent.
pub(crate) struct Optimum {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
}

pub(crate) const MAX_ITER: usize = 500;
const TOL_OBJECTIVE: f64 = 1e-10;
const TOL_DECREMENT: f64 = 1e-12;

fn log_prior(theta: &[f64], priors: &[Option<InverseGamma>]) -> f64 {
    theta
        .iter()
        .zip(priors)
        .filter_map(|(&t, p)| p.as_ref().map(|p| p.log_density(t)))
        .sum()
}

fn objective(model: &MixedModel, theta: &[f64], priors: &[Option<InverseGamma>]) -> Option<f64> {
    let ev = model.evaluate(theta, false)?;
    let f = if priors.iter().any(Option::is_some) {
        ev.loglik + log_prior(theta, priors)
    } else {
        ev.loglik
    };
    f.is_finite().then_some(f)
}

/// Projected Newton ascent on the variance scale with an active set for
/// components sitting on their lower bound.
pub(crate) fn maximize(model: &MixedModel, start: Vec<f64>, lower: &[f64], priors: &[Option<InverseGamma>]) -> Optimum {
    let m = model.n_params();
    let has_prior = priors.iter().any(Option::is_some);
    let mut theta: Vec<f64> = start.iter().zip(lower).map(|(t, lo)| t.max(*lo)).collect();
    let mut f = match objective(model, &theta, priors) {
        Some(f) => f,
        None => {
            return Optimum {
                theta,
                converged: false,
                n_iter: 0,
            }
        }
    };
    let scale = theta.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut converged = false;
    let mut n_iter = 0;

    while n_iter < MAX_ITER {
        n_iter += 1;
        let ev = match model.evaluate(&theta, true) {
            Some(ev) => ev,
            None => break,
        };
        let d = ev.grad.expect("derivatives requested");
        let mut g = d.gradient.clone();
        let mut observed = d.observed.clone();
        let mut fisher = d.fisher.clone();
        if has_prior {
            for i in 0..m {
                if let Some(p) = &priors[i] {
                    g[i] += p.d_log_density(theta[i]);
                    let curv = -p.d2_log_density(theta[i]);
                    observed[(i, i)] += curv;
                    fisher[(i, i)] += curv.max(0.0);
                }
            }
        }
        let free: Vec<usize> = (0..m).filter(|&i| theta[i] > lower[i] || g[i] > 0.0).collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let newton = newton_direction(&free, &g, &observed);
        let is_newton = newton.is_some();
        let direction = newton
            .or_else(|| newton_direction(&free, &g, &fisher))
            .unwrap_or_else(|| {
                // steepest ascent scaled to the current magnitude
                let gn = free.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt();
                let mut dir = vec![0.0; m];
                if gn > 0.0 {
                    for &i in &free {
                        dir[i] = g[i] / gn * 0.1 * scale;
                    }
                }
                dir
            });

        // Near the optimum a Newton step changes f by less than its rounding
        // error, so ascent is only required up to that noise.
        let noise = 8.0 * f64::EPSILON * (1.0 + f.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = (0..m).map(|i| (theta[i] + step * direction[i]).max(lower[i])).collect();
            if let Some(fc) = objective(model, &cand, priors) {
                if fc >= f - noise {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            // no ascent possible: at the optimum to working precision if the
            // projected gradient is negligible
            let pg: f64 = free
                .iter()
                .map(|&i| (g[i] * theta[i].max(scale * 1e-8)).abs())
                .fold(0.0, f64::max);
            converged = pg < 1e-6 * (1.0 + f.abs());
            break;
        };
        let df = (fc - f).abs();
        // predicted gain of the undamped Newton step; the damped step says
        // little once f is at rounding level
        let decrement: f64 = free.iter().map(|&i| g[i] * direction[i]).sum();
        if is_newton && df < TOL_OBJECTIVE && decrement < TOL_DECREMENT * (1.0 + f.abs()) {
            // f cannot resolve a step this small but the gradient can, so
            // finish on the Newton point
            theta = (0..m).map(|i| (theta[i] + direction[i]).max(lower[i])).collect();
            converged = true;
            break;
        }
        theta = cand;
        f = fc;
    }
    Optimum {
        theta,
        converged,
        n_iter,
    }
}

fn newton_direction(free: &[usize], g: &DVector<f64>, info: &DMatrix<f64>) -> Option<Vec<f64>> {
    let nfree = free.len();
    let h = DMatrix::from_fn(nfree, nfree, |i, j| info[(free[i], free[j])]);
    let rhs = DVector::from_fn(nfree, |i, _| g[free[i]]);
    let chol = h.cholesky()?;
    let sol = chol.solve(&rhs);
    if rhs.dot(&sol) < 0.0 || sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut dir = vec![0.0; g.len()];
    for (i, &fi) in free.iter().enumerate() {
        dir[fi] = sol[i];
    }
    Some(dir)
}
