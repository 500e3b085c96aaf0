use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use mixshrink::designs::{
    bootstrap_ratio_band, complete_bibd_spec, dominance_check, equally_spaced, generate_layout, msep_study,
    write_study_csv, DesignKind, DesignLayout, MsepConfig,
};
use mixshrink::dists::{normal_approx_compare, poisson_fit, CountSample, SkellamParams};
use mixshrink::football::{load_matches, LoadOptions};
use mixshrink::lmm::{map_fit, reml_fit, InverseGamma, ModelSpec, ObservationTable, Sign, VariancePrior, RESIDUAL};
use mixshrink::shrinkage::MeanVector;

use crate::output::{read_to_string, Run};
use crate::SeedArg;

#[derive(Clone, Copy, ValueEnum)]
pub enum Design {
    Rcbd,
    Bibd,
}

#[derive(Args)]
pub struct MsepArgs {
    #[arg(long, value_enum, default_value = "rcbd")]
    design: Design,
    /// Treatments.
    #[arg(long, default_value_t = 21)]
    t: usize,
    /// Blocks.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Block size; required for a BIBD, ignored for an RCBD.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    sigma2e: f64,
    /// Block-to-error variance ratios.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    rho: Vec<f64>,
    /// Ranges of the equally spaced treatment means.
    #[arg(long, value_delimiter = ',', default_value = "0,2,5,10,100")]
    delta: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Block layout file (one block per line, 1-based treatment indices).
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Bootstrap resamples for 95% ratio bands; 0 skips the bands file.
    #[arg(long, default_value_t = 0)]
    boot: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

pub fn simulate_msep(run: &Run, a: MsepArgs) -> Result<Vec<PathBuf>> {
    let design = match a.design {
        Design::Rcbd => DesignKind::Rcbd,
        Design::Bibd => DesignKind::Bibd,
    };
    let k = match (design, a.k) {
        (DesignKind::Rcbd, _) => a.t,
        (DesignKind::Bibd, Some(k)) => k,
        (DesignKind::Bibd, None) => bail!("--k is required for --design bibd"),
    };
    let layout = a.layout.as_ref().map(DesignLayout::read).transpose()?;
    let config = MsepConfig {
        design,
        t: a.t,
        k,
        n: a.n,
        sigma2_e: a.sigma2e,
        rho: a.rho,
        delta: a.delta,
        reps: a.reps,
        seed: a.seed.seed,
        layout,
    };
    let cells = msep_study(&config)?;
    let mut paths = vec![run.csv(&format!("msep_{design}.csv"), |w| Ok(write_study_csv(w, &cells, None)?))?];
    if a.boot > 0 {
        paths.push(run.csv(&format!("msep_{design}_bands.csv"), |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["rho", "delta", "ratio", "lower", "upper", "nonconverged"])?;
            for cell in &cells {
                let (lo, hi) = bootstrap_ratio_band(cell, a.boot, 0.95, a.seed.seed)?;
                c.serialize((cell.rho, cell.delta, cell.ratio, lo, hi, cell.nonconverged))?;
            }
            c.flush()?;
            Ok(())
        })?);
    }
    Ok(paths)
}

#[derive(Clone, Debug)]
enum MuSpec {
    Zeros,
    /// Equally spaced over `[-range/2, range/2]`.
    Spread(f64),
    /// First mean set to the value, the rest zero.
    Spike(f64),
    Values(Vec<f64>),
}

fn parse_mu(s: &str) -> Result<MuSpec, String> {
    let num = |v: &str| v.parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    if s == "zeros" {
        return Ok(MuSpec::Zeros);
    }
    if let Some(v) = s.strip_prefix("spread:") {
        return Ok(MuSpec::Spread(num(v)?));
    }
    if let Some(v) = s.strip_prefix("spike:") {
        return Ok(MuSpec::Spike(num(v)?));
    }
    s.split(',')
        .map(|v| num(v.trim()))
        .collect::<Result<_, _>>()
        .map(MuSpec::Values)
}

#[derive(Args)]
pub struct DominanceArgs {
    #[arg(long, default_value_t = 10)]
    t: usize,
    /// Diagonal part of the covariance `aI + bJ`.
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    b: f64,
    /// `zeros`, `spread:<range>`, `spike:<value>` or a comma-separated list.
    #[arg(long, value_parser = parse_mu, default_value = "zeros")]
    mu: MuSpec,
    #[arg(long, default_value_t = 10_000)]
    reps: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

pub fn dominance(run: &Run, a: DominanceArgs) -> Result<Vec<PathBuf>> {
    let mu = match a.mu {
        MuSpec::Zeros => vec![0.0; a.t],
        MuSpec::Spread(range) => equally_spaced(a.t, range),
        MuSpec::Spike(v) => {
            let mut m = vec![0.0; a.t];
            if let Some(first) = m.first_mut() {
                *first = v;
            }
            m
        }
        MuSpec::Values(v) => v,
    };
    let r = dominance_check(a.t, a.a, a.b, &MeanVector::new(mu.clone())?, a.reps, a.seed.seed)?;

    #[derive(Serialize)]
    struct Out {
        t: usize,
        a: f64,
        b: f64,
        mu: Vec<f64>,
        reps: usize,
        mse_shrink: f64,
        mse_raw: f64,
        se_shrink: f64,
        se_raw: f64,
        se_diff: f64,
        /// `t (a + b)`, the exact risk of the raw means.
        mse_raw_exact: f64,
    }
    let out = Out {
        t: a.t,
        a: a.a,
        b: a.b,
        mu,
        reps: r.reps,
        mse_shrink: r.mse_shrink,
        mse_raw: r.mse_raw,
        se_shrink: r.se_shrink,
        se_raw: r.se_raw,
        se_diff: r.se_diff,
        mse_raw_exact: a.t as f64 * (a.a + a.b),
    };
    Ok(vec![run.json("dominance.json", &out)?])
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    Reml,
    Map,
}

fn parse_factor(s: &str) -> Result<(String, Sign), String> {
    let (name, sign) = match s.rsplit_once(':') {
        Some((n, "+")) => (n, Sign::Plus),
        Some((n, "-")) => (n, Sign::Minus),
        Some((_, other)) => return Err(format!("sign must be + or -, got `{other}`")),
        None => (s, Sign::Plus),
    };
    if name.is_empty() {
        return Err("empty factor name".into());
    }
    Ok((name.to_string(), sign))
}

fn parse_prior(s: &str) -> Result<(String, f64, f64), String> {
    let err = || format!("expected NAME=X:D, got `{s}`");
    let (name, rest) = s.split_once('=').ok_or_else(err)?;
    let (x, d) = rest.split_once(':').ok_or_else(err)?;
    let x = x.parse().map_err(|_| err())?;
    let d = d.parse().map_err(|_| err())?;
    Ok((name.to_string(), x, d))
}

#[derive(Args)]
pub struct FitArgs {
    /// CSV with header `response,<factor>,...`.
    #[arg(long)]
    table: PathBuf,
    /// Random factor `NAME` or `NAME:-` for a negatively signed one; repeat
    /// in model order. Defaults to every table factor with a plus sign.
    #[arg(long = "factor", value_parser = parse_factor)]
    factors: Vec<(String, Sign)>,
    #[arg(long, value_enum, default_value = "reml")]
    method: Method,
    /// Scaled inverse chi-square prior `NAME=X:D` (point estimate X on D
    /// degrees of freedom) for a factor or `residual`; MAP only.
    #[arg(long = "prior", value_parser = parse_prior)]
    priors: Vec<(String, f64, f64)>,
}

pub fn fit(run: &Run, a: FitArgs) -> Result<Vec<PathBuf>> {
    let file = std::fs::File::open(&a.table).with_context(|| format!("opening {}", a.table.display()))?;
    let table = ObservationTable::read_csv(file)?;
    let factors = if a.factors.is_empty() {
        table.factors().iter().map(|f| (f.clone(), Sign::Plus)).collect()
    } else {
        a.factors
    };
    let spec = ModelSpec::new(factors)?;
    let result = match a.method {
        Method::Reml => {
            if !a.priors.is_empty() {
                bail!("--prior applies only to --method map");
            }
            reml_fit(&table, &spec)?
        }
        Method::Map => {
            let mut prior = VariancePrior::flat();
            for (name, x, d) in a.priors {
                let ig = InverseGamma::from_scaled_chi2(x, d)?;
                prior = if name == RESIDUAL {
                    prior.with_residual(ig)
                } else {
                    prior.with_factor(name, ig)
                };
            }
            map_fit(&table, &spec, &prior)?
        }
    };
    Ok(vec![run.json("fit.json", &result)?])
}

#[derive(Args)]
pub struct BibdArgs {
    #[arg(long)]
    t: usize,
    /// Block size.
    #[arg(long)]
    k: usize,
    /// Replications of each treatment.
    #[arg(long)]
    r: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

pub fn gen_bibd(run: &Run, a: BibdArgs) -> Result<Vec<PathBuf>> {
    let spec = complete_bibd_spec(a.t, a.k, a.r)?;
    let layout = generate_layout(&spec, a.seed.seed)?;
    let mut w = run.text_file("bibd.txt")?;
    w.write_all(layout.to_text().as_bytes())?;
    w.flush()?;
    Ok(vec![run.path("bibd.txt")])
}

#[derive(Args)]
pub struct SkellamArgs {
    /// Home goal mean.
    #[arg(long)]
    mu1: f64,
    /// Away goal mean.
    #[arg(long)]
    mu2: f64,
}

pub fn skellam(run: &Run, a: SkellamArgs) -> Result<Vec<PathBuf>> {
    let params = SkellamParams::new(a.mu1, a.mu2)?;
    let cmp = normal_approx_compare(&params);

    #[derive(Serialize)]
    struct Out {
        mu1: f64,
        mu2: f64,
        mean: f64,
        sd: f64,
        max_pmf_gap: f64,
        max_cdf_gap: f64,
        rows: usize,
    }
    let out = Out {
        mu1: a.mu1,
        mu2: a.mu2,
        mean: cmp.mean,
        sd: cmp.sd,
        max_pmf_gap: cmp.max_pmf_gap,
        max_cdf_gap: cmp.max_cdf_gap,
        rows: cmp.table.len(),
    };
    Ok(vec![
        run.csv("skellam.csv", |w| Ok(cmp.write_csv(w)?))?,
        run.json("skellam.json", &out)?,
    ])
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Venue {
    Home,
    Away,
    All,
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false, args = ["counts", "values", "matches"])]
pub struct PoissonArgs {
    /// File of nonnegative integers separated by commas or whitespace.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Inline comma-separated counts.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<u64>>,
    /// Match file; counts are the goals scored by `--team`.
    #[arg(long, requires = "team")]
    matches: Option<PathBuf>,
    #[arg(long)]
    team: Option<String>,
    /// Which of the team's games to count.
    #[arg(long, value_enum, default_value = "home")]
    venue: Venue,
    /// Season label for match files without a season column.
    #[arg(long)]
    season_label: Option<String>,
}

pub fn poisson(run: &Run, a: PoissonArgs) -> Result<Vec<PathBuf>> {
    let counts: Vec<u64> = if let Some(v) = a.values {
        v
    } else if let Some(path) = a.counts {
        read_to_string(&path)?
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<u64>()
                    .with_context(|| format!("`{f}` is not a nonnegative integer"))
            })
            .collect::<Result<_>>()?
    } else {
        let path = a.matches.expect("clap group requires a source");
        let team = a.team.expect("clap requires --team with --matches");
        let file = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let options = LoadOptions {
            season: a.season_label,
            ..Default::default()
        };
        let mut goals = Vec::new();
        for season in load_matches(file, &options)? {
            for m in &season.matches {
                let home = m.home_team == team && matches!(a.venue, Venue::Home | Venue::All);
                let away = m.away_team == team && matches!(a.venue, Venue::Away | Venue::All);
                if home {
                    goals.push(u64::from(m.home_goals));
                } else if away {
                    goals.push(u64::from(m.away_goals));
                }
            }
        }
        if goals.is_empty() {
            bail!("no matches for team `{team}` at the requested venue");
        }
        goals
    };
    let fit = poisson_fit(&CountSample::new(counts)?);
    Ok(vec![run.json("poisson.json", &fit)?])
}
