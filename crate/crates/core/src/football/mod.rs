//! Home/away goal-difference model for a league season: loading results,
//! the chronological train/test split, REML or MAP fits, outcome
//! classification, pool scoring, season summaries and prior carry-over.

mod load;
mod pool;
mod season;

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::lmm::{map_fit, reml_fit, FitResult, ModelSpec, ObservationTable, Sign, VariancePrior};

pub use load::{load_matches, write_matches, ColumnMap, LoadOptions};
pub use pool::{
    confusion, expected_pool_score, simulate_pool_lines, threshold_search, CdfPoint, ConfusionTable,
    OutcomeProbabilities, PoolSimulation, PoolStrategy, ScoreDistribution, LINE_GAMES,
};
pub use season::{
    ems_statistics, ems_statistics_table, extract_home_only_priors, extract_priors, rmsep_compare, rmsep_means,
    season_summary, synthetic_season, CompareModel, ComponentEstimate, EmsStatistics, RmsepRow, SeasonSummary,
    SyntheticLeague, SyntheticTruth, TeamSummary,
};

/// Factor names in the goal-difference tables.
pub const HOME: &str = "home";
pub const AWAY: &str = "away";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub date: NaiveDate,
    pub home_team: String,
    pub away_team: String,
    pub home_goals: u32,
    pub away_goals: u32,
}

impl MatchRecord {
    pub fn goal_diff(&self) -> f64 {
        self.home_goals as f64 - self.away_goals as f64
    }

    pub fn outcome(&self) -> Outcome {
        match self.home_goals.cmp(&self.away_goals) {
            std::cmp::Ordering::Greater => Outcome::W,
            std::cmp::Ordering::Less => Outcome::L,
            std::cmp::Ordering::Equal => Outcome::D,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeasonDataset {
    pub season_id: String,
    /// Chronological; ties keep input order.
    pub matches: Vec<MatchRecord>,
}

impl SeasonDataset {
    pub fn new(season_id: impl Into<String>, mut matches: Vec<MatchRecord>) -> Result<Self> {
        if let Some(m) = matches.iter().find(|m| m.home_team == m.away_team) {
            return domain(format!("team `{}` cannot play itself", m.home_team));
        }
        matches.sort_by_key(|m| m.date);
        Ok(Self {
            season_id: season_id.into(),
            matches,
        })
    }

    pub fn teams(&self) -> BTreeSet<String> {
        self.matches
            .iter()
            .flat_map(|m| [m.home_team.clone(), m.away_team.clone()])
            .collect()
    }

    fn teams_iter(&self) -> impl Iterator<Item = &str> {
        self.matches
            .iter()
            .flat_map(|m| [m.home_team.as_str(), m.away_team.as_str()])
    }

    /// Checks that every ordered pair of distinct teams meets exactly once.
    pub fn validate_complete(&self) -> Result<()> {
        let teams = self.teams();
        let mut seen = BTreeSet::new();
        for m in &self.matches {
            if !seen.insert((m.home_team.as_str(), m.away_team.as_str())) {
                return domain(format!(
                    "season {}: {} v {} appears more than once",
                    self.season_id, m.home_team, m.away_team
                ));
            }
        }
        let t = teams.len();
        if t < 2 || seen.len() != t * (t - 1) {
            return domain(format!(
                "season {} is incomplete: {} of {} fixtures for {t} teams",
                self.season_id,
                seen.len(),
                t * t.saturating_sub(1)
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    D,
    L,
    W,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::D, Outcome::L, Outcome::W];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSplit {
    pub train: Vec<MatchRecord>,
    pub test: Vec<MatchRecord>,
}

/// Trains on each team's first `h` home fixtures; everything else is test.
pub fn training_split(season: &SeasonDataset, h: usize) -> Result<TrainingSplit> {
    let mut home_count: BTreeMap<&str, usize> = season.teams_iter().map(|t| (t, 0)).collect();
    let mut split = TrainingSplit {
        train: Vec::new(),
        test: Vec::new(),
    };
    for m in &season.matches {
        let c = home_count.get_mut(m.home_team.as_str()).expect("team collected");
        *c += 1;
        if *c <= h {
            split.train.push(m.clone());
        } else {
            split.test.push(m.clone());
        }
    }
    if let Some((team, n)) = home_count.iter().find(|(_, &n)| n < h) {
        return domain(format!("team `{team}` has {n} home fixtures, fewer than h = {h}"));
    }
    Ok(split)
}

/// Which random team effects enter the goal-difference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeamModel {
    /// `y = mu + h_home - a_away + e`.
    HomeAway,
    /// `y = mu + h_home + e`.
    HomeOnly,
}

impl TeamModel {
    pub fn spec(self) -> ModelSpec {
        let spec = ModelSpec::intercept_only().with(HOME, Sign::Plus).expect("fresh spec");
        match self {
            TeamModel::HomeAway => spec.with(AWAY, Sign::Minus).expect("distinct names"),
            TeamModel::HomeOnly => spec,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Reml,
    Map,
}

/// Goal differences with `home` and `away` factors.
pub fn match_table(matches: &[MatchRecord]) -> Result<ObservationTable> {
    let mut table = ObservationTable::new([HOME, AWAY])?;
    for m in matches {
        table.push(m.goal_diff(), &[m.home_team.as_str(), m.away_team.as_str()])?;
    }
    Ok(table)
}

fn home_table(matches: &[MatchRecord]) -> Result<ObservationTable> {
    let mut table = ObservationTable::new([HOME])?;
    for m in matches {
        table.push(m.goal_diff(), &[m.home_team.as_str()])?;
    }
    Ok(table)
}

pub fn fit_home_away(train: &[MatchRecord], method: FitMethod, prior: Option<&VariancePrior>) -> Result<FitResult> {
    fit_team_model(train, TeamModel::HomeAway, method, prior)
}

pub fn fit_team_model(
    train: &[MatchRecord],
    model: TeamModel,
    method: FitMethod,
    prior: Option<&VariancePrior>,
) -> Result<FitResult> {
    let table = match model {
        TeamModel::HomeAway => {
            let home: BTreeSet<&str> = train.iter().map(|m| m.home_team.as_str()).collect();
            let away: BTreeSet<&str> = train.iter().map(|m| m.away_team.as_str()).collect();
            if let Some(t) = home.symmetric_difference(&away).next() {
                let side = if home.contains(t) { "away" } else { "home" };
                return domain(format!("team `{t}` has no {side} match in the training data"));
            }
            match_table(train)?
        }
        TeamModel::HomeOnly => home_table(train)?,
    };
    let spec = model.spec();
    match method {
        FitMethod::Reml => reml_fit(&table, &spec),
        FitMethod::Map => {
            let prior = prior.ok_or_else(|| Error::Domain("MAP fit requires a prior".into()))?;
            map_fit(&table, &spec, prior)
        }
    }
}

/// `mu_hat + h_home - a_away`; the away term is dropped for home-only fits.
pub fn predict_goal_diff(fit: &FitResult, home: &str, away: &str) -> Result<f64> {
    if home == away {
        return domain(format!("team `{home}` cannot play itself"));
    }
    let h = fit
        .effect(HOME, home)
        .ok_or_else(|| Error::UnknownTeam(home.to_string()))?;
    let a = match fit.effects.get(AWAY) {
        Some(levels) => *levels.get(away).ok_or_else(|| Error::UnknownTeam(away.to_string()))?,
        None => 0.0,
    };
    Ok(fit.mu_hat + h - a)
}

/// `W` above `d`, `L` below `-d`, otherwise a draw.
pub fn classify_outcome(yhat: f64, d: f64) -> Outcome {
    if yhat > d {
        Outcome::W
    } else if yhat < -d {
        Outcome::L
    } else {
        Outcome::D
    }
}
