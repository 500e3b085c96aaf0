use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mixshrink::football::{
    classify_outcome, confusion, ems_statistics, expected_pool_score, extract_home_only_priors, extract_priors,
    fit_team_model, load_matches, predict_goal_diff, rmsep_compare, rmsep_means, season_summary as summarize,
    simulate_pool_lines, synthetic_season, threshold_search as search, training_split, write_matches, ColumnMap,
    CompareModel, EmsStatistics, FitMethod, LoadOptions, MatchRecord, Outcome, OutcomeProbabilities, PoolStrategy,
    ScoreDistribution, SeasonDataset, SyntheticLeague, TeamModel, LINE_GAMES,
};
use mixshrink::lmm::{FitResult, VariancePrior};
use mixshrink::rng::stream;

use crate::output::{read_to_string, Run};
use crate::studies::Method;
use crate::SeedArg;

#[derive(Args)]
pub struct Source {
    /// Match results CSV, native or `Date,HomeTeam,AwayTeam,FTHG,FTAG` header.
    #[arg(long)]
    matches: PathBuf,
    /// Season label for files without a season column.
    #[arg(long)]
    season_label: Option<String>,
    /// `key=value` file mapping field names to column names.
    #[arg(long)]
    mapping: Option<PathBuf>,
}

impl Source {
    fn load(&self) -> Result<Vec<SeasonDataset>> {
        let mapping = match &self.mapping {
            Some(p) => ColumnMap::parse(&read_to_string(p)?)?,
            None => ColumnMap::default(),
        };
        let options = LoadOptions {
            season: self.season_label.clone(),
            mapping,
        };
        let file = std::fs::File::open(&self.matches).with_context(|| format!("opening {}", self.matches.display()))?;
        let seasons = load_matches(file, &options).with_context(|| format!("reading {}", self.matches.display()))?;
        if seasons.is_empty() {
            bail!("{} holds no matches", self.matches.display());
        }
        Ok(seasons)
    }
}

/// Index of season `id`, or of the last season when `id` is absent.
fn season_index(seasons: &[SeasonDataset], id: Option<&str>) -> Result<usize> {
    match id {
        None => Ok(seasons.len() - 1),
        Some(id) => seasons
            .iter()
            .position(|s| s.season_id == id)
            .with_context(|| format!("season `{id}` not found")),
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Model {
    HomeAway,
    HomeOnly,
}

impl From<Model> for TeamModel {
    fn from(m: Model) -> Self {
        match m {
            Model::HomeAway => TeamModel::HomeAway,
            Model::HomeOnly => TeamModel::HomeOnly,
        }
    }
}

#[derive(Args)]
pub struct ModelArgs {
    /// Season to fit; defaults to the last one in the file.
    #[arg(long)]
    season: Option<String>,
    #[arg(long, value_enum, default_value = "home-away")]
    model: Model,
    #[arg(long, value_enum, default_value = "reml")]
    method: Method,
    /// Season whose moment estimates give the MAP priors; defaults to the
    /// one before `--season`.
    #[arg(long)]
    prior_season: Option<String>,
}

impl ModelArgs {
    fn prior(&self, seasons: &[SeasonDataset], index: usize) -> Result<Option<VariancePrior>> {
        if matches!(self.method, Method::Reml) {
            return Ok(None);
        }
        let prev = match &self.prior_season {
            Some(id) => season_index(seasons, Some(id))?,
            None => index
                .checked_sub(1)
                .context("MAP needs a previous season for its priors; pass --prior-season")?,
        };
        let prev = &seasons[prev];
        Ok(Some(match self.model {
            Model::HomeAway => extract_priors(prev)?,
            Model::HomeOnly => extract_home_only_priors(prev)?,
        }))
    }

    fn fit(&self, seasons: &[SeasonDataset], index: usize, train: &[MatchRecord]) -> Result<FitResult> {
        let prior = self.prior(seasons, index)?;
        let method = match self.method {
            Method::Reml => FitMethod::Reml,
            Method::Map => FitMethod::Map,
        };
        Ok(fit_team_model(train, self.model.into(), method, prior.as_ref())?)
    }
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    model: ModelArgs,
    /// Train on each team's first `h` home games; the whole season when absent.
    #[arg(long)]
    h: Option<usize>,
}

pub fn fit(run: &Run, a: FitArgs) -> Result<Vec<PathBuf>> {
    let seasons = a.source.load()?;
    let i = season_index(&seasons, a.model.season.as_deref())?;
    let train = match a.h {
        Some(h) => training_split(&seasons[i], h)?.train,
        None => seasons[i].matches.clone(),
    };
    let result = a.model.fit(&seasons, i, &train)?;
    Ok(vec![run.json("fit.json", &result)?])
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 7)]
    h: usize,
    /// Draw threshold: `|yhat| <= d` predicts a draw. Adds outcome columns
    /// and confusion.csv.
    #[arg(long)]
    d: Option<f64>,
}

pub fn predict(run: &Run, a: PredictArgs) -> Result<Vec<PathBuf>> {
    let seasons = a.source.load()?;
    let i = season_index(&seasons, a.model.season.as_deref())?;
    let split = training_split(&seasons[i], a.h)?;
    let result = a.model.fit(&seasons, i, &split.train)?;
    let yhat: Vec<f64> = split
        .test
        .iter()
        .map(|m| predict_goal_diff(&result, &m.home_team, &m.away_team))
        .collect::<Result<_, _>>()?;
    let predicted: Option<Vec<Outcome>> = a.d.map(|d| yhat.iter().map(|&y| classify_outcome(y, d)).collect());
    let id = &seasons[i].season_id;
    let mut paths = vec![run.csv("predictions.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "season",
            "date",
            "home_team",
            "away_team",
            "yhat",
            "actual_gd",
            "actual",
            "predicted",
        ])?;
        for (j, m) in split.test.iter().enumerate() {
            let pred = predicted.as_ref().map_or(String::new(), |p| p[j].to_string());
            c.write_record([
                id.clone(),
                m.date.format("%Y-%m-%d").to_string(),
                m.home_team.clone(),
                m.away_team.clone(),
                yhat[j].to_string(),
                m.goal_diff().to_string(),
                m.outcome().to_string(),
                pred,
            ])?;
        }
        c.flush()?;
        Ok(())
    })?];
    if let Some(pred) = &predicted {
        let actual: Vec<Outcome> = split.test.iter().map(|m| m.outcome()).collect();
        let table = confusion(pred, &actual)?;
        paths.push(run.csv("confusion.csv", |w| Ok(table.write_csv(w)?))?);
    }
    Ok(paths)
}

#[derive(Args)]
pub struct SummaryArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    model: ModelArgs,
    /// Home games per team in the training part.
    #[arg(long, default_value_t = 7)]
    h: usize,
}

pub fn season_summary(run: &Run, a: SummaryArgs) -> Result<Vec<PathBuf>> {
    let seasons = a.source.load()?;
    let i = season_index(&seasons, a.model.season.as_deref())?;
    let split = training_split(&seasons[i], a.h)?;
    let result = a.model.fit(&seasons, i, &split.train)?;
    let summary = summarize(&result, &split)?;

    #[derive(Serialize)]
    struct Out<'a> {
        season: &'a str,
        h: usize,
        rank_mae: f64,
        rank_correlation: Option<f64>,
    }
    Ok(vec![
        run.csv("season_summary.csv", |w| Ok(summary.write_csv(w)?))?,
        run.json(
            "season_summary.json",
            &Out {
                season: &seasons[i].season_id,
                h: a.h,
                rank_mae: summary.rank_mae,
                rank_correlation: summary.rank_correlation,
            },
        )?,
    ])
}

#[derive(Args)]
pub struct PriorsArgs {
    #[command(flatten)]
    source: Source,
    /// Complete season to summarise; defaults to the last one in the file.
    #[arg(long)]
    season: Option<String>,
}

pub fn priors(run: &Run, a: PriorsArgs) -> Result<Vec<PathBuf>> {
    let seasons = a.source.load()?;
    let season = &seasons[season_index(&seasons, a.season.as_deref())?];
    let ha = ems_statistics(season, TeamModel::HomeAway)?;
    let ho = ems_statistics(season, TeamModel::HomeOnly)?;

    #[derive(Serialize)]
    struct Out {
        home_away: EmsStatistics,
        home_away_prior: VariancePrior,
        home_only: EmsStatistics,
        home_only_prior: VariancePrior,
    }
    let out = Out {
        home_away_prior: ha.prior(),
        home_away: ha,
        home_only_prior: ho.prior(),
        home_only: ho,
    };
    Ok(vec![run.json("priors.json", &out)?])
}

#[derive(Args)]
pub struct RmsepArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 7)]
    h: usize,
    /// Comma-separated subset of intercept, ha_reml, ha_map, home_only_reml, home_only_map.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "intercept,ha_reml,ha_map,home_only_reml,home_only_map"
    )]
    models: Vec<CompareModel>,
}

pub fn rmsep(run: &Run, a: RmsepArgs) -> Result<Vec<PathBuf>> {
    let seasons = a.source.load()?;
    let rows = rmsep_compare(&seasons, &a.models, a.h)?;
    let means = rmsep_means(&rows);
    Ok(vec![
        run.csv("rmsep.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            for r in &rows {
                c.serialize(r)?;
            }
            c.flush()?;
            Ok(())
        })?,
        run.csv("rmsep_means.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["model", "mean_rmsep", "mean_rank_mae"])?;
            for (m, r, mae) in &means {
                c.serialize((m.name(), r, mae))?;
            }
            c.flush()?;
            Ok(())
        })?,
    ])
}

#[derive(Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 20)]
    teams: usize,
    #[arg(long, default_value_t = 1)]
    seasons: usize,
    #[arg(long, default_value_t = 0.35)]
    mu: f64,
    #[arg(long, default_value_t = 0.6)]
    sigma_h: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_a: f64,
    #[arg(long, default_value_t = 1.3)]
    sigma_e: f64,
    #[command(flatten)]
    pub seed: SeedArg,
}

pub fn synthetic(run: &Run, a: SyntheticArgs) -> Result<Vec<PathBuf>> {
    let league = SyntheticLeague::new(a.teams, a.mu, a.sigma_h, a.sigma_a, a.sigma_e);
    let width = a.seasons.to_string().len().max(2);
    let mut seasons = Vec::with_capacity(a.seasons);
    let mut truths = Vec::with_capacity(a.seasons);
    for s in 0..a.seasons {
        let id = format!("S{:0width$}", s + 1);
        let (season, truth) = synthetic_season(&league, &id, &mut stream(a.seed.seed, s as u64))?;
        seasons.push(season);
        truths.push((id, truth));
    }
    Ok(vec![
        run.csv("matches.csv", |w| Ok(write_matches(w, &seasons)?))?,
        run.csv("truth.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["season", "team", "home", "away"])?;
            for (id, truth) in &truths {
                for (team, h) in &truth.home {
                    c.serialize((id, team, h, truth.away[team]))?;
                }
            }
            c.flush()?;
            Ok(())
        })?,
    ])
}

#[derive(Args)]
pub struct Truth {
    /// Probability of a home win.
    #[arg(long)]
    pwin: f64,
    #[arg(long)]
    ploss: f64,
    #[arg(long)]
    pdraw: f64,
    /// Share of draws that finish 0-0.
    #[arg(long)]
    noscore_share: f64,
}

impl Truth {
    fn probabilities(&self) -> Result<OutcomeProbabilities> {
        Ok(OutcomeProbabilities::new(
            self.pwin,
            self.ploss,
            self.pdraw,
            self.noscore_share,
        )?)
    }
}

#[derive(Args)]
pub struct Picks {
    /// Rate of correct home-win picks.
    #[arg(long)]
    qwin: Option<f64>,
    /// Rate of correct away-win picks.
    #[arg(long)]
    qloss: Option<f64>,
    /// Rate of correct draw picks.
    #[arg(long)]
    qdraw: Option<f64>,
    /// 0-0 share among correct draw picks; defaults to `--noscore-share`.
    #[arg(long)]
    q_noscore_share: Option<f64>,
}

impl Picks {
    fn strategy(&self, truth: &Truth) -> Result<PoolStrategy> {
        let (Some(q_win), Some(q_loss), Some(q_draw)) = (self.qwin, self.qloss, self.qdraw) else {
            bail!("the frequencies strategy needs --qwin, --qloss and --qdraw");
        };
        Ok(PoolStrategy::Frequencies {
            q_win,
            q_loss,
            q_draw,
            noscore_share: self.q_noscore_share.unwrap_or(truth.noscore_share),
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Strategy {
    Random,
    Frequencies,
}

#[derive(Args)]
pub struct PoolExpectedArgs {
    #[command(flatten)]
    truth: Truth,
    #[arg(long, value_enum, default_value = "random")]
    strategy: Strategy,
    #[command(flatten)]
    picks: Picks,
}

pub fn pool_expected(run: &Run, a: PoolExpectedArgs) -> Result<Vec<PathBuf>> {
    let truth = a.truth.probabilities()?;
    let strategy = match a.strategy {
        Strategy::Random => PoolStrategy::UniformRandom,
        Strategy::Frequencies => a.picks.strategy(&a.truth)?,
    };
    let per_game = expected_pool_score(&truth, &strategy)?;

    #[derive(Serialize)]
    struct Out {
        truth: OutcomeProbabilities,
        strategy: PoolStrategy,
        /// Probabilities of scoring 1, 1.5, 2 and 3 points.
        score_probabilities: [f64; 4],
        per_game: f64,
        per_line: f64,
    }
    let out = Out {
        truth,
        strategy,
        score_probabilities: ScoreDistribution::from_strategy(&truth, &strategy)?.p,
        per_game,
        per_line: per_game * LINE_GAMES as f64,
    };
    Ok(vec![run.json("pool_expected.json", &out)?])
}

#[derive(Args)]
pub struct PoolSimulateArgs {
    #[command(flatten)]
    truth: Truth,
    /// Strategy `a` is the frequencies strategy given by these picks;
    /// strategy `b` is uniform random picking.
    #[command(flatten)]
    picks: Picks,
    #[arg(long, default_value_t = 100_000)]
    lines: usize,
    /// z multiplier for the dominance check `F_a <= F_b + z se`.
    #[arg(long, default_value_t = 3.0)]
    z: f64,
    #[command(flatten)]
    pub seed: SeedArg,
}

pub fn pool_simulate(run: &Run, a: PoolSimulateArgs) -> Result<Vec<PathBuf>> {
    let truth = a.truth.probabilities()?;
    let strat_a = a.picks.strategy(&a.truth)?;
    let dist_a = ScoreDistribution::from_strategy(&truth, &strat_a)?;
    let dist_b = ScoreDistribution::from_strategy(&truth, &PoolStrategy::UniformRandom)?;
    let sim = simulate_pool_lines(&dist_a, &dist_b, a.lines, a.seed.seed)?;

    #[derive(Serialize)]
    struct Out {
        lines: usize,
        z: f64,
        expected_a: f64,
        expected_b: f64,
        mean_a: f64,
        mean_b: f64,
        a_dominates: bool,
        max_abs_z: f64,
    }
    let line = LINE_GAMES as f64;
    let out = Out {
        lines: a.lines,
        z: a.z,
        expected_a: dist_a.mean() * line,
        expected_b: dist_b.mean() * line,
        mean_a: sim.mean_a(),
        mean_b: sim.mean_b(),
        a_dominates: sim.a_dominates(a.z),
        max_abs_z: sim.max_abs_z(),
    };
    Ok(vec![
        run.csv("pool_cdf.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            for p in &sim.cdf {
                c.serialize(p)?;
            }
            c.flush()?;
            Ok(())
        })?,
        run.json("pool_simulate.json", &out)?,
    ])
}

#[derive(Clone)]
pub struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [lo, hi, step] = parts[..] else {
        return Err(format!("expected LO:HI:STEP, got `{s}`"));
    };
    if !(step > 0.0 && hi >= lo && lo >= 0.0) {
        return Err("need 0 <= LO <= HI and STEP > 0".into());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok(Grid((0..=n).map(|i| lo + i as f64 * step).collect()))
}

#[derive(Args)]
pub struct ThresholdArgs {
    /// predictions.csv from `epl-predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Threshold grid `LO:HI:STEP`.
    #[arg(long, value_parser = parse_grid, default_value = "0:1:0.01")]
    grid: Grid,
}

#[derive(Deserialize)]
struct PredictionRow {
    yhat: f64,
    actual_gd: f64,
}

pub fn threshold_search(run: &Run, a: ThresholdArgs) -> Result<Vec<PathBuf>> {
    let file = std::fs::File::open(&a.predictions).with_context(|| format!("opening {}", a.predictions.display()))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let rows: Vec<PredictionRow> = rdr.deserialize().collect::<Result<_, _>>()?;
    let yhat: Vec<f64> = rows.iter().map(|r| r.yhat).collect();
    let actual: Vec<Outcome> = rows
        .iter()
        .map(|r| match r.actual_gd.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => Outcome::W,
            Some(std::cmp::Ordering::Less) => Outcome::L,
            _ => Outcome::D,
        })
        .collect();
    let actual_draws = actual.iter().filter(|&&o| o == Outcome::D).count();
    let d = search(&yhat, actual_draws, &a.grid.0)?;
    let predicted: Vec<Outcome> = yhat.iter().map(|&y| classify_outcome(y, d)).collect();
    let table = confusion(&predicted, &actual)?;

    #[derive(Serialize)]
    struct Out {
        d: f64,
        matches: usize,
        actual_draws: usize,
        predicted_draws: u64,
        draw_precision: Option<f64>,
        /// Share of all games correctly picked as each outcome.
        correct: BTreeMap<String, f64>,
    }
    let freq = table.correct_frequencies();
    let out = Out {
        d,
        matches: rows.len(),
        actual_draws,
        predicted_draws: table.predicted_totals()[Outcome::D.index()],
        draw_precision: table.draw_precision(),
        correct: Outcome::ALL.iter().map(|o| (o.to_string(), freq[o.index()])).collect(),
    };
    Ok(vec![
        run.json("threshold.json", &out)?,
        run.csv("confusion.csv", |w| Ok(table.write_csv(w)?))?,
    ])
}
