//! Poisson fits to goal counts and the Skellam distribution of a goal
//! difference, with its moment-matched normal approximation.

use std::io::Write;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::factorial::ln_factorial;

use crate::error::{domain, Result};

/// Goals per game; nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountSample(Vec<u64>);

impl CountSample {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return domain("count sample is empty");
        }
        Ok(Self(counts))
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmfRow {
    /// Lower end of the cell; the last row is the tail `k >= value`.
    pub k: u64,
    pub tail: bool,
    pub observed: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Cells after pooling, as inclusive `(from, to)` ranges; `to = None` is open.
    pub cells: Vec<(u64, Option<u64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoissonFit {
    pub n: usize,
    pub mean: f64,
    /// Observed support `0..=max` plus a tail cell.
    pub table: Vec<PmfRow>,
    /// Pearson test with cells pooled to expected counts of at least 5;
    /// `None` when fewer than 3 cells remain or the sample is all zero.
    pub gof: Option<ChiSquareTest>,
}

fn poisson_ln_pmf(k: u64, mu: f64) -> f64 {
    k as f64 * mu.ln() - mu - ln_factorial(k)
}

/// Maximum-likelihood Poisson fit with a pooled Pearson goodness-of-fit test.
pub fn poisson_fit(sample: &CountSample) -> PoissonFit {
    let counts = sample.counts();
    let n = counts.len();
    let mean = counts.iter().sum::<u64>() as f64 / n as f64;
    let max = *counts.iter().max().expect("nonempty");
    let mut observed = vec![0u64; max as usize + 1];
    for &c in counts {
        observed[c as usize] += 1;
    }
    if mean == 0.0 {
        let table = vec![
            PmfRow {
                k: 0,
                tail: false,
                observed: n as u64,
                probability: 1.0,
            },
            PmfRow {
                k: 1,
                tail: true,
                observed: 0,
                probability: 0.0,
            },
        ];
        return PoissonFit {
            n,
            mean,
            table,
            gof: None,
        };
    }
    let mut table: Vec<PmfRow> = observed
        .iter()
        .enumerate()
        .map(|(k, &o)| PmfRow {
            k: k as u64,
            tail: false,
            observed: o,
            probability: poisson_ln_pmf(k as u64, mean).exp(),
        })
        .collect();
    let head: f64 = table.iter().map(|r| r.probability).sum();
    table.push(PmfRow {
        k: max + 1,
        tail: true,
        observed: 0,
        probability: (1.0 - head).max(0.0),
    });
    let gof = pearson_pooled(&table, n as f64);
    PoissonFit { n, mean, table, gof }
}

fn pearson_pooled(table: &[PmfRow], n: f64) -> Option<ChiSquareTest> {
    // Merge left to right until each cell expects at least 5, then fold a
    // short final cell into its neighbour.
    let mut cells: Vec<(u64, Option<u64>, f64, f64)> = Vec::new();
    let mut open: Option<(u64, f64, f64)> = None;
    for row in table {
        let (from, o, e) = open.take().unwrap_or((row.k, 0.0, 0.0));
        let (o, e) = (o + row.observed as f64, e + n * row.probability);
        let to = if row.tail { None } else { Some(row.k) };
        if e >= 5.0 {
            cells.push((from, to, o, e));
        } else {
            open = Some((from, o, e));
        }
    }
    if let Some((from, o, e)) = open {
        match cells.last_mut() {
            Some(last) => {
                last.1 = None;
                last.2 += o;
                last.3 += e;
            }
            None => cells.push((from, None, o, e)),
        }
    }
    if let Some(last) = cells.last_mut() {
        last.1 = None;
    }
    // One df for the total and one for the estimated mean.
    if cells.len() < 3 {
        return None;
    }
    let df = cells.len() - 2;
    let statistic: f64 = cells.iter().map(|c| (c.2 - c.3).powi(2) / c.3).sum();
    let p_value = 1.0 - ChiSquared::new(df as f64).expect("df >= 1").cdf(statistic);
    Some(ChiSquareTest {
        statistic,
        df,
        p_value,
        cells: cells.iter().map(|c| (c.0, c.1)).collect(),
    })
}

/// Means of the two Poisson counts whose difference is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SkellamParams {
    pub mu1: f64,
    pub mu2: f64,
}

impl SkellamParams {
    pub fn new(mu1: f64, mu2: f64) -> Result<Self> {
        if !(mu1.is_finite() && mu1 > 0.0 && mu2.is_finite() && mu2 > 0.0) {
            return domain(format!("Skellam means must be finite and positive, got ({mu1}, {mu2})"));
        }
        Ok(Self { mu1, mu2 })
    }

    pub fn mean(&self) -> f64 {
        self.mu1 - self.mu2
    }

    pub fn variance(&self) -> f64 {
        self.mu1 + self.mu2
    }
}

/// `P(X1 - X2 = k)` by summing `pois(j; mu1) pois(j - k; mu2)` over `j`
/// until past the peak and below `1e-16` of the running sum.
pub fn skellam_pmf(k: i64, params: &SkellamParams) -> f64 {
    let (l1, l2) = (params.mu1.ln(), params.mu2.ln());
    let term = |j: u64, i: u64| {
        let a = j as f64 * l1 - params.mu1 - ln_factorial(j);
        let b = i as f64 * l2 - params.mu2 - ln_factorial(i);
        (a + b).exp()
    };
    // j indexes X1, i = j - k indexes X2
    let (mut j, mut i) = if k >= 0 { (k as u64, 0) } else { (0, k.unsigned_abs()) };
    let mut sum = 0.0;
    loop {
        let t = term(j, i);
        sum += t;
        let falling = params.mu1 * params.mu2 < ((j + 1) * (i + 1)) as f64;
        if falling && t <= 1e-16 * sum {
            return sum;
        }
        j += 1;
        i += 1;
    }
}

/// Smallest and largest `k` around the mode with `pmf(k) >= cutoff`.
pub fn skellam_support(params: &SkellamParams, cutoff: f64) -> (i64, i64) {
    let mode = params.mean().round() as i64;
    let mut lo = mode;
    while skellam_pmf(lo - 1, params) >= cutoff {
        lo -= 1;
    }
    let mut hi = mode;
    while skellam_pmf(hi + 1, params) >= cutoff {
        hi += 1;
    }
    (lo, hi)
}

/// Support cutoff used for normalisation and cumulative sums.
pub const SUPPORT_CUTOFF: f64 = 1e-18;
/// Rows with exact probability below this are left out of comparison tables.
pub const TABLE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub k: i64,
    pub exact: f64,
    /// `Phi((k + 1/2 - m)/s) - Phi((k - 1/2 - m)/s)`.
    pub normal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalComparison {
    pub mean: f64,
    pub sd: f64,
    pub max_pmf_gap: f64,
    /// `max |F(k) - Phi((k + 1/2 - m)/s)|` over the table rows.
    pub max_cdf_gap: f64,
    pub table: Vec<ComparisonRow>,
}

impl NormalComparison {
    /// CSV `k,exact,normal`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.table {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact Skellam probabilities against the continuity-corrected normal with
/// the same mean and variance.
pub fn normal_approx_compare(params: &SkellamParams) -> NormalComparison {
    let (mean, sd) = (params.mean(), params.variance().sqrt());
    let normal = Normal::new(mean, sd).expect("positive sd");
    let (lo, hi) = skellam_support(params, SUPPORT_CUTOFF);
    let mut cdf = 0.0;
    let mut table = Vec::new();
    let (mut max_pmf_gap, mut max_cdf_gap) = (0.0f64, 0.0f64);
    for k in lo..=hi {
        let exact = skellam_pmf(k, params);
        cdf += exact;
        if exact < TABLE_CUTOFF {
            continue;
        }
        let upper = normal.cdf(k as f64 + 0.5);
        let cell = upper - normal.cdf(k as f64 - 0.5);
        max_pmf_gap = max_pmf_gap.max((exact - cell).abs());
        max_cdf_gap = max_cdf_gap.max((cdf - upper).abs());
        table.push(ComparisonRow { k, exact, normal: cell });
    }
    NormalComparison {
        mean,
        sd,
        max_pmf_gap,
        max_cdf_gap,
        table,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    use super::*;

    fn params(a: f64, b: f64) -> SkellamParams {
        SkellamParams::new(a, b).unwrap()
    }

    /// Plain convolution with factorials built by repeated multiplication,
    /// truncated once terms drop below 1e-12 of the sum.
    fn pmf_oracle(k: i64, mu1: f64, mu2: f64) -> f64 {
        let pois = |j: i64, mu: f64| {
            let mut p = (-mu).exp();
            for i in 1..=j {
                p *= mu / i as f64;
            }
            p
        };
        let mut sum = 0.0;
        let mut j = k.max(0);
        loop {
            let t = pois(j, mu1) * pois(j - k, mu2);
            sum += t;
            if j > k.max(0) + 5 && t < 1e-12 * sum {
                return sum;
            }
            j += 1;
        }
    }

    #[test]
    fn equal_unit_means_at_zero() {
        // e^-2 sum 1/(j!)^2
        let p = skellam_pmf(0, &params(1.0, 1.0));
        assert!((p - 0.308_508_322_553_671).abs() < 1e-12, "{p}");
        assert!((p - pmf_oracle(0, 1.0, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn matches_oracle_over_a_grid() {
        for &(a, b) in &[(2.0, 1.0), (0.3, 3.7), (10.0, 10.0), (1.4, 1.4)] {
            for k in -15..=15 {
                let (p, q) = (skellam_pmf(k, &params(a, b)), pmf_oracle(k, a, b));
                assert!((p - q).abs() < 1e-12 + 1e-10 * q, "({a},{b}) k={k}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn moments_over_a_wide_window() {
        let p = params(2.0, 1.0);
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for k in -50..=50 {
            let q = skellam_pmf(k, &p);
            m0 += q;
            m1 += k as f64 * q;
            m2 += (k * k) as f64 * q;
        }
        assert!((m0 - 1.0).abs() < 1e-10);
        assert!((m1 - 1.0).abs() < 1e-10);
        assert!((m2 - m1 * m1 - 3.0).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn swapping_means_mirrors_exactly(a in 0.05f64..8.0, b in 0.05f64..8.0, k in -20i64..20) {
            prop_assert_eq!(skellam_pmf(k, &params(a, b)), skellam_pmf(-k, &params(b, a)));
        }

        #[test]
        fn normalised_on_the_adaptive_support(a in 0.05f64..10.0, b in 0.05f64..10.0) {
            let p = params(a, b);
            let (lo, hi) = skellam_support(&p, SUPPORT_CUTOFF);
            let total: f64 = (lo..=hi).map(|k| skellam_pmf(k, &p)).sum();
            prop_assert!((total - 1.0).abs() < 1e-10, "{}", total);
        }

        #[test]
        fn poisson_table_sums_to_one(counts in prop::collection::vec(0u64..9, 1..300)) {
            let fit = poisson_fit(&CountSample::new(counts).unwrap());
            let total: f64 = fit.table.iter().map(|r| r.probability).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_at_equal_means() {
        let p = params(1.7, 1.7);
        for k in 0..12 {
            assert_eq!(skellam_pmf(k, &p), skellam_pmf(-k, &p));
        }
        assert_eq!(normal_approx_compare(&p).mean, 0.0);
    }

    #[test]
    fn normal_gap_regression_values() {
        // Frozen from a 40-digit convolution run.
        let c = normal_approx_compare(&params(2.0, 1.0));
        assert!(
            (c.max_cdf_gap - 0.019_175_293_720_852_31).abs() < 1e-9,
            "{}",
            c.max_cdf_gap
        );
        assert!(
            (c.max_pmf_gap - 0.018_535_203_005_336_08).abs() < 1e-9,
            "{}",
            c.max_pmf_gap
        );
        assert_eq!((c.mean, c.sd), (1.0, 3f64.sqrt()));
        let even = normal_approx_compare(&params(10.0, 10.0));
        assert!((even.max_cdf_gap - 0.001_650_384_925_407_648).abs() < 1e-9);
        assert!(even.max_cdf_gap < c.max_cdf_gap);
        assert!(c.table.iter().all(|r| r.exact >= TABLE_CUTOFF));

        let mut csv = Vec::new();
        c.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("k,exact,normal\n"));
        assert_eq!(text.lines().count(), c.table.len() + 1);
    }

    #[test]
    fn poisson_fit_basics() {
        let fit = poisson_fit(&CountSample::new(vec![1, 2, 3]).unwrap());
        assert_eq!(fit.mean, 2.0);
        assert_eq!(fit.table.len(), 5);
        assert!(fit.gof.is_none());

        let zero = poisson_fit(&CountSample::new(vec![0; 4]).unwrap());
        assert_eq!(zero.mean, 0.0);
        assert_eq!(zero.table[0].probability, 1.0);
        assert!(zero.gof.is_none());
        assert!(CountSample::new(vec![]).is_err());
    }

    #[test]
    fn pooled_cells_expect_at_least_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pois = Poisson::new(2.14).unwrap();
        let counts: Vec<u64> = (0..400).map(|_| pois.sample(&mut rng) as u64).collect();
        let fit = poisson_fit(&CountSample::new(counts).unwrap());
        let gof = fit.gof.unwrap();
        assert_eq!(gof.df, gof.cells.len() - 2);
        assert_eq!(gof.cells.first().unwrap().0, 0);
        assert_eq!(gof.cells.last().unwrap().1, None);
        for (from, to) in &gof.cells {
            let e: f64 = fit
                .table
                .iter()
                .filter(|r| r.k >= *from && to.is_none_or(|t| r.k <= t))
                .map(|r| r.probability * 400.0)
                .sum();
            assert!(e >= 5.0, "cell {from}..{to:?} expects {e}");
        }
    }

    #[test]
    fn poisson_calibration() {
        let pois = Poisson::new(2.14).unwrap();
        let n = 10_000;
        let mut accepted = 0;
        let mut means = Vec::new();
        for rep in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(rep);
            let counts: Vec<u64> = (0..n).map(|_| pois.sample(&mut rng) as u64).collect();
            let fit = poisson_fit(&CountSample::new(counts).unwrap());
            means.push(fit.mean);
            accepted += usize::from(fit.gof.unwrap().p_value > 0.01);
        }
        let se = (2.14 / n as f64).sqrt();
        assert!((means[0] - 2.14).abs() < 3.0 * se);
        assert!(accepted >= 95, "{accepted}");
    }
}
