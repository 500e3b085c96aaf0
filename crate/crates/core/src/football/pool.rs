use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Outcome;
use crate::error::{domain, Result};
use crate::rng::stream;

/// Games in one pool line.
pub const LINE_GAMES: usize = 8;

/// Points for a correct home win, away win, no-score draw and scoring draw.
const POINTS: [f64; 4] = [1.0, 1.5, 2.0, 3.0];

/// Home-team result probabilities and the share of draws that are 0-0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbabilities {
    pub p_win: f64,
    pub p_loss: f64,
    pub p_draw: f64,
    pub noscore_share: f64,
}

impl OutcomeProbabilities {
    pub fn new(p_win: f64, p_loss: f64, p_draw: f64, noscore_share: f64) -> Result<Self> {
        let p = [p_win, p_loss, p_draw, noscore_share];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return domain("probabilities and the no-score share must lie in [0, 1]");
        }
        if (p_win + p_loss + p_draw - 1.0).abs() > 1e-12 {
            return domain(format!("p_win + p_loss + p_draw = {}, not 1", p_win + p_loss + p_draw));
        }
        Ok(Self {
            p_win,
            p_loss,
            p_draw,
            noscore_share,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PoolStrategy {
    /// Each outcome picked with probability 1/3, independently of the result.
    UniformRandom,
    /// Rates of correct win, loss and draw picks, and the 0-0 share among
    /// correct draw picks.
    Frequencies {
        q_win: f64,
        q_loss: f64,
        q_draw: f64,
        noscore_share: f64,
    },
}

/// Per-game probabilities of scoring 1, 1.5, 2 and 3 points; the rest scores 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreDistribution {
    pub p: [f64; 4],
}

impl ScoreDistribution {
    pub fn new(p: [f64; 4]) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || p.iter().sum::<f64>() > 1.0 + 1e-12 {
            return domain("score probabilities must be in [0, 1] and sum to at most 1");
        }
        Ok(Self { p })
    }

    pub fn from_strategy(truth: &OutcomeProbabilities, strategy: &PoolStrategy) -> Result<Self> {
        match *strategy {
            PoolStrategy::UniformRandom => Self::new([
                truth.p_win / 3.0,
                truth.p_loss / 3.0,
                truth.p_draw * truth.noscore_share / 3.0,
                truth.p_draw * (1.0 - truth.noscore_share) / 3.0,
            ]),
            PoolStrategy::Frequencies {
                q_win,
                q_loss,
                q_draw,
                noscore_share,
            } => {
                if !(0.0..=1.0).contains(&noscore_share) {
                    return domain("no-score share must lie in [0, 1]");
                }
                Self::new([q_win, q_loss, q_draw * noscore_share, q_draw * (1.0 - noscore_share)])
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.p.iter().zip(POINTS).map(|(p, pts)| p * pts).sum()
    }

    /// Points for one game, in half points.
    fn draw_half_points<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (p, pts) in self.p.iter().zip(POINTS) {
            acc += p;
            if u < acc {
                return (2.0 * pts) as u32;
            }
        }
        0
    }
}

/// Expected points per game.
pub fn expected_pool_score(truth: &OutcomeProbabilities, strategy: &PoolStrategy) -> Result<f64> {
    Ok(ScoreDistribution::from_strategy(truth, strategy)?.mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub score: f64,
    pub cdf_a: f64,
    pub cdf_b: f64,
    /// Standard error of `cdf_a - cdf_b` for independent samples.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolSimulation {
    pub samples_a: Vec<f64>,
    pub samples_b: Vec<f64>,
    /// Empirical CDFs at every achievable line score `0, 0.5, ..., 24`.
    pub cdf: Vec<CdfPoint>,
}

impl PoolSimulation {
    pub fn mean_a(&self) -> f64 {
        self.samples_a.iter().sum::<f64>() / self.samples_a.len() as f64
    }

    pub fn mean_b(&self) -> f64 {
        self.samples_b.iter().sum::<f64>() / self.samples_b.len() as f64
    }

    /// True when `F_a <= F_b + z se` at every score, i.e. line scores under
    /// `a` are not detectably smaller than under `b` anywhere.
    pub fn a_dominates(&self, z: f64) -> bool {
        self.cdf.iter().all(|c| c.cdf_a <= c.cdf_b + z * c.se)
    }

    /// Largest `|F_a - F_b| / se` over scores where the SE is positive.
    pub fn max_abs_z(&self) -> f64 {
        self.cdf
            .iter()
            .filter(|c| c.se > 0.0)
            .map(|c| (c.cdf_a - c.cdf_b).abs() / c.se)
            .fold(0.0, f64::max)
    }
}

/// Simulates `n_lines` eight-game totals under each score distribution.
///
/// Line `i` of `a` uses stream `(seed, i)` and line `i` of `b` uses stream
/// `(seed, n_lines + i)`, so the two samples are independent.
pub fn simulate_pool_lines(
    a: &ScoreDistribution,
    b: &ScoreDistribution,
    n_lines: usize,
    seed: u64,
) -> Result<PoolSimulation> {
    if n_lines < 1000 {
        return domain("need at least 1000 simulated lines");
    }
    let line = |dist: &ScoreDistribution, index: usize| -> u32 {
        let mut rng = stream(seed, index as u64);
        (0..LINE_GAMES).map(|_| dist.draw_half_points(&mut rng)).sum()
    };
    let half_a: Vec<u32> = (0..n_lines).into_par_iter().map(|i| line(a, i)).collect();
    let half_b: Vec<u32> = (0..n_lines).into_par_iter().map(|i| line(b, n_lines + i)).collect();

    let max = (2.0 * POINTS[3]) as usize * LINE_GAMES;
    let counts = |h: &[u32]| {
        let mut c = vec![0usize; max + 1];
        for &v in h {
            c[v as usize] += 1;
        }
        c
    };
    let (ca, cb) = (counts(&half_a), counts(&half_b));
    let n = n_lines as f64;
    let (mut acc_a, mut acc_b) = (0, 0);
    let cdf = (0..=max)
        .map(|s| {
            acc_a += ca[s];
            acc_b += cb[s];
            let (fa, fb) = (acc_a as f64 / n, acc_b as f64 / n);
            CdfPoint {
                score: s as f64 / 2.0,
                cdf_a: fa,
                cdf_b: fb,
                se: (fa * (1.0 - fa) / n + fb * (1.0 - fb) / n).sqrt(),
            }
        })
        .collect();
    let to_points = |h: Vec<u32>| h.into_iter().map(|v| v as f64 / 2.0).collect();
    Ok(PoolSimulation {
        samples_a: to_points(half_a),
        samples_b: to_points(half_b),
        cdf,
    })
}

/// Grid value whose predicted-draw count `#{|yhat| <= d}` is closest to
/// `actual_draws`; ties go to the smaller `d`.
pub fn threshold_search(predictions: &[f64], actual_draws: usize, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return domain("threshold grid is empty");
    }
    if grid.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return domain("thresholds must be finite and nonnegative");
    }
    let mut best: Option<(usize, f64)> = None;
    for &d in grid {
        let draws = predictions.iter().filter(|y| y.abs() <= d).count();
        let gap = draws.abs_diff(actual_draws);
        let better = match best {
            None => true,
            Some((g, bd)) => gap < g || (gap == g && d < bd),
        };
        if better {
            best = Some((gap, d));
        }
    }
    Ok(best.expect("grid is nonempty").1)
}

/// Actual-by-predicted counts, rows and columns in `D, L, W` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionTable {
    pub fn from_counts(counts: [[u64; 3]; 3]) -> Self {
        Self { counts }
    }

    pub fn actual_totals(&self) -> [u64; 3] {
        self.counts.map(|row| row.iter().sum())
    }

    pub fn predicted_totals(&self) -> [u64; 3] {
        std::array::from_fn(|j| self.counts.iter().map(|row| row[j]).sum())
    }

    pub fn total(&self) -> u64 {
        self.actual_totals().iter().sum()
    }

    /// Correct draw picks over all draw picks; `None` when no draw was picked.
    pub fn draw_precision(&self) -> Option<f64> {
        let picked = self.predicted_totals()[Outcome::D.index()];
        (picked > 0).then(|| self.counts[0][0] as f64 / picked as f64)
    }

    /// Share of all games that were correctly picked as each outcome, in
    /// `D, L, W` order.
    pub fn correct_frequencies(&self) -> [f64; 3] {
        let total = self.total() as f64;
        std::array::from_fn(|i| {
            if total > 0.0 {
                self.counts[i][i] as f64 / total
            } else {
                0.0
            }
        })
    }

    /// CSV with header `actual,pred_D,pred_L,pred_W,total` and a final
    /// `total` row of predicted margins.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["actual", "pred_D", "pred_L", "pred_W", "total"])?;
        let actual = self.actual_totals();
        for o in Outcome::ALL {
            let row = self.counts[o.index()];
            w.write_record([
                o.to_string(),
                row[0].to_string(),
                row[1].to_string(),
                row[2].to_string(),
                actual[o.index()].to_string(),
            ])?;
        }
        let pred = self.predicted_totals();
        w.write_record([
            "total".to_string(),
            pred[0].to_string(),
            pred[1].to_string(),
            pred[2].to_string(),
            self.total().to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

pub fn confusion(predicted: &[Outcome], actual: &[Outcome]) -> Result<ConfusionTable> {
    if predicted.len() != actual.len() {
        return domain(format!(
            "{} predictions but {} actual results",
            predicted.len(),
            actual.len()
        ));
    }
    let mut table = ConfusionTable::default();
    for (p, a) in predicted.iter().zip(actual) {
        table.counts[a.index()][p.index()] += 1;
    }
    Ok(table)
}
