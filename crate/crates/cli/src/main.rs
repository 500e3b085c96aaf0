//! `mixshrink`: simulation studies, mixed-model fits, football predictions,
//! pool evaluation and distribution checks, written as CSV and JSON files.

mod epl;
mod output;
mod studies;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use output::Run;

#[derive(Parser)]
#[command(
    name = "mixshrink",
    version,
    about = "Shrinkage, mixed-model and football prediction tools"
)]
struct Cli {
    /// Output directory, created if absent.
    #[arg(long, global = true, env = "MIXSHRINK_OUT", default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// EBLUP/MLE prediction-error ratios over a (rho, delta) grid -> msep_<design>.csv
    SimulateMsep(studies::MsepArgs),
    /// Monte-Carlo risk of the covariance shrinker against raw means -> dominance.json
    Dominance(studies::DominanceArgs),
    /// REML or MAP fit of a generic observation table -> fit.json
    Fit(studies::FitArgs),
    /// Randomized search for a balanced incomplete block layout -> bibd.txt
    GenBibd(studies::BibdArgs),
    /// Fit the home/away (or home-only) model to one season -> fit.json
    EplFit(epl::FitArgs),
    /// Predicted goal differences for a season's test matches -> predictions.csv
    EplPredict(epl::PredictArgs),
    /// Per-team predicted and actual standings -> season_summary.csv
    EplSeasonSummary(epl::SummaryArgs),
    /// Moment estimates and inverse-Gamma priors from a complete season -> priors.json
    EplPriors(epl::PriorsArgs),
    /// Test-set RMSEP and ranking MAE per season and model -> rmsep.csv, rmsep_means.csv
    EplRmsep(epl::RmsepArgs),
    /// Simulate seasons from the home/away model -> matches.csv
    EplSynthetic(epl::SyntheticArgs),
    /// Expected pool points per game and per line -> pool_expected.json
    PoolExpected(epl::PoolExpectedArgs),
    /// Simulated line-score distributions of two strategies -> pool_cdf.csv, pool_simulate.json
    PoolSimulate(epl::PoolSimulateArgs),
    /// Draw threshold matching the actual number of draws -> threshold.json, confusion.csv
    ThresholdSearch(epl::ThresholdArgs),
    /// Exact Skellam probabilities against the normal approximation -> skellam.csv, skellam.json
    DistSkellam(studies::SkellamArgs),
    /// Poisson fit and goodness of fit for goal counts -> poisson.json
    DistPoissonFit(studies::PoissonArgs),
}

#[derive(Args, Clone, Copy)]
pub struct SeedArg {
    /// Master seed; replicate i always draws from stream (seed, i).
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let invocation = output::invocation(&args);
    match dispatch(cli, invocation) {
        Ok(paths) => {
            output::report(&paths);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli, invocation: String) -> anyhow::Result<Vec<PathBuf>> {
    let seed = match &cli.command {
        Command::SimulateMsep(a) => Some(a.seed.seed),
        Command::Dominance(a) => Some(a.seed.seed),
        Command::GenBibd(a) => Some(a.seed.seed),
        Command::EplSynthetic(a) => Some(a.seed.seed),
        Command::PoolSimulate(a) => Some(a.seed.seed),
        _ => None,
    };
    let run = Run::new(cli.out, invocation, seed)?;
    match cli.command {
        Command::SimulateMsep(a) => studies::simulate_msep(&run, a),
        Command::Dominance(a) => studies::dominance(&run, a),
        Command::Fit(a) => studies::fit(&run, a),
        Command::GenBibd(a) => studies::gen_bibd(&run, a),
        Command::EplFit(a) => epl::fit(&run, a),
        Command::EplPredict(a) => epl::predict(&run, a),
        Command::EplSeasonSummary(a) => epl::season_summary(&run, a),
        Command::EplPriors(a) => epl::priors(&run, a),
        Command::EplRmsep(a) => epl::rmsep(&run, a),
        Command::EplSynthetic(a) => epl::synthetic(&run, a),
        Command::PoolExpected(a) => epl::pool_expected(&run, a),
        Command::PoolSimulate(a) => epl::pool_simulate(&run, a),
        Command::ThresholdSearch(a) => epl::threshold_search(&run, a),
        Command::DistSkellam(a) => studies::skellam(&run, a),
        Command::DistPoissonFit(a) => studies::poisson(&run, a),
    }
}
