use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    fit_team_model, predict_goal_diff, training_split, FitMethod, MatchRecord, SeasonDataset, TeamModel, TrainingSplit,
    AWAY, HOME,
};
use crate::error::{domain, Error, Result};
use crate::lmm::{FitResult, InverseGamma, ObservationTable, VariancePrior};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeamSummary {
    pub team: String,
    /// `h + a`, the ranking score.
    pub strength: f64,
    pub train_gd: f64,
    pub predicted_final_gd: f64,
    pub actual_final_gd: f64,
    pub points: u32,
    pub predicted_rank: usize,
    pub actual_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeasonSummary {
    pub teams: Vec<TeamSummary>,
    pub rank_mae: f64,
    /// Correlation between predicted and actual ranks; `None` below 2 teams.
    pub rank_correlation: Option<f64>,
}

impl SeasonSummary {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for t in &self.teams {
            w.serialize(t)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-team goal differences and rankings for a fitted season.
///
/// The predicted final goal difference adds the actual training results to
/// the predicted goal differences of the test matches. Predicted ranks order
/// teams by `h + a` and actual ranks by points (3 per win, 1 per draw), then
/// goal difference, then goals scored. Remaining ties go to the smaller label.
pub fn season_summary(fit: &FitResult, split: &TrainingSplit) -> Result<SeasonSummary> {
    #[derive(Default)]
    struct Acc {
        train_gd: f64,
        predicted: f64,
        actual: f64,
        goals_for: u32,
        points: u32,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    let mut record = |m: &MatchRecord, predicted: f64, train: bool| {
        let gd = m.goal_diff();
        let (hp, ap) = match m.home_goals.cmp(&m.away_goals) {
            std::cmp::Ordering::Greater => (3, 0),
            std::cmp::Ordering::Less => (0, 3),
            std::cmp::Ordering::Equal => (1, 1),
        };
        for (team, sign, goals, pts) in [
            (&m.home_team, 1.0, m.home_goals, hp),
            (&m.away_team, -1.0, m.away_goals, ap),
        ] {
            let a = acc.entry(team.clone()).or_default();
            if train {
                a.train_gd += sign * gd;
            }
            a.predicted += sign * predicted;
            a.actual += sign * gd;
            a.goals_for += goals;
            a.points += pts;
        }
    };
    for m in &split.train {
        record(m, m.goal_diff(), true);
    }
    for m in &split.test {
        let yhat = predict_goal_diff(fit, &m.home_team, &m.away_team)?;
        record(m, yhat, false);
    }

    let mut teams = acc
        .iter()
        .map(|(team, a)| {
            let h = fit
                .effect(HOME, team)
                .ok_or_else(|| Error::UnknownTeam(team.to_string()))?;
            let away = match fit.effects.get(AWAY) {
                Some(levels) => *levels.get(team).ok_or_else(|| Error::UnknownTeam(team.to_string()))?,
                None => 0.0,
            };
            Ok(TeamSummary {
                team: team.to_string(),
                strength: h + away,
                train_gd: a.train_gd,
                predicted_final_gd: a.predicted,
                actual_final_gd: a.actual,
                points: a.points,
                predicted_rank: 0,
                actual_rank: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..teams.len()).collect();
    order.sort_by(|&i, &j| {
        teams[j]
            .strength
            .total_cmp(&teams[i].strength)
            .then_with(|| teams[i].team.cmp(&teams[j].team))
    });
    for (rank, &i) in order.iter().enumerate() {
        teams[i].predicted_rank = rank + 1;
    }
    let goals_for: BTreeMap<&str, u32> = acc.iter().map(|(t, a)| (t.as_str(), a.goals_for)).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&teams[i], &teams[j]);
        b.points
            .cmp(&a.points)
            .then(b.actual_final_gd.total_cmp(&a.actual_final_gd))
            .then(goals_for[b.team.as_str()].cmp(&goals_for[a.team.as_str()]))
            .then_with(|| a.team.cmp(&b.team))
    });
    for (rank, &i) in order.iter().enumerate() {
        teams[i].actual_rank = rank + 1;
    }

    let n = teams.len() as f64;
    let rank_mae = teams
        .iter()
        .map(|t| (t.predicted_rank as f64 - t.actual_rank as f64).abs())
        .sum::<f64>()
        / n;
    let rank_correlation = (teams.len() >= 2).then(|| {
        // Both rankings are permutations of 1..=n with the same mean and variance.
        let mean = (n + 1.0) / 2.0;
        let var: f64 = (1..=teams.len()).map(|r| (r as f64 - mean).powi(2)).sum();
        teams
            .iter()
            .map(|t| (t.predicted_rank as f64 - mean) * (t.actual_rank as f64 - mean))
            .sum::<f64>()
            / var
    });
    Ok(SeasonSummary {
        teams,
        rank_mae,
        rank_correlation,
    })
}

/// One variance component's moment estimate and its scaled chi-square df.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentEstimate {
    pub name: String,
    pub mean_square: f64,
    pub df: f64,
    /// Moment estimate, truncated at 0.
    pub estimate: f64,
    /// Degrees of freedom of the scaled chi-square approximation.
    pub prior_df: f64,
}

impl ComponentEstimate {
    /// `IG(d/2, d X / 2)`, or `None` (flat) when `X` or `d` is not positive.
    pub fn prior(&self) -> Option<InverseGamma> {
        (self.estimate > 0.0 && self.prior_df > 0.0 && self.prior_df.is_finite())
            .then(|| InverseGamma::from_scaled_chi2(self.estimate, self.prior_df).ok())
            .flatten()
    }
}

/// Expected-mean-square estimates from a complete season.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmsStatistics {
    pub season_id: String,
    pub teams: usize,
    /// Coefficient of the team variance in its expected mean square.
    pub multiplier: f64,
    pub residual: ComponentEstimate,
    pub factors: Vec<ComponentEstimate>,
}

impl EmsStatistics {
    pub fn prior(&self) -> VariancePrior {
        let mut prior = VariancePrior::flat();
        prior.residual = self.residual.prior();
        for f in &self.factors {
            if let Some(p) = f.prior() {
                prior = prior.with_factor(f.name.clone(), p);
            }
        }
        prior
    }
}

/// Team-factor mean squares from least-squares fits of the main-effects
/// model, each factor adjusted for the other (Type II), with the team
/// variance multiplier `T - 1`.
///
/// Each team estimate is `max(0, (MS_team - MS_E) / (T - 1))`, with
/// Satterthwaite df `X^2 / [(MS_team/m)^2/df_team + (MS_E/m)^2/df_E]`.
pub fn ems_statistics(season: &SeasonDataset, model: TeamModel) -> Result<EmsStatistics> {
    season.validate_complete()?;
    let mut stats = ems_statistics_table(&super::match_table(&season.matches)?, model)?;
    stats.season_id = season.season_id.clone();
    Ok(stats)
}

/// As [`ems_statistics`] for a table with `home` and `away` factors that
/// holds one complete double round robin. Completeness is not checked.
pub fn ems_statistics_table(table: &ObservationTable, model: TeamModel) -> Result<EmsStatistics> {
    let (hi, ai) = (table.factor_index(HOME)?, table.factor_index(AWAY)?);
    let teams: BTreeSet<String> = table.levels_of(hi).into_iter().chain(table.levels_of(ai)).collect();
    let t = teams.len();
    if t < 3 {
        return domain("need at least 3 teams");
    }
    let index: BTreeMap<&str, usize> = teams.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let y = DVector::from_column_slice(table.responses());
    let home: Vec<usize> = (0..table.len()).map(|r| index[table.level(r, hi)]).collect();
    let away: Vec<usize> = (0..table.len()).map(|r| index[table.level(r, ai)]).collect();

    let n = y.len();
    let m = (t - 1) as f64;
    let rss_of = |factors: &[&[usize]]| rss(&y, &design(n, t, factors));
    let (full_rss, full_rank, team_ss) = match model {
        TeamModel::HomeAway => {
            let full = rss_of(&[&home, &away])?;
            let ss_h = rss_of(&[&away])? - full;
            let ss_a = rss_of(&[&home])? - full;
            (full, 2 * t - 1, vec![(HOME, ss_h), (AWAY, ss_a)])
        }
        TeamModel::HomeOnly => {
            let full = rss_of(&[&home])?;
            (full, t, vec![(HOME, rss_of(&[])? - full)])
        }
    };
    let df_e = (n - full_rank) as f64;
    if df_e < 1.0 {
        return domain("no residual degrees of freedom");
    }
    let ms_e = full_rss.max(0.0) / df_e;
    let factors = team_ss
        .into_iter()
        .map(|(name, ss)| {
            let ms = ss.max(0.0) / m;
            let x = ((ms - ms_e) / m).max(0.0);
            let denom = (ms / m).powi(2) / m + (ms_e / m).powi(2) / df_e;
            ComponentEstimate {
                name: name.to_string(),
                mean_square: ms,
                df: m,
                estimate: x,
                prior_df: if x > 0.0 { x * x / denom } else { 0.0 },
            }
        })
        .collect();
    Ok(EmsStatistics {
        season_id: String::new(),
        teams: t,
        multiplier: m,
        residual: ComponentEstimate {
            name: crate::lmm::RESIDUAL.to_string(),
            mean_square: ms_e,
            df: df_e,
            estimate: ms_e,
            prior_df: df_e,
        },
        factors,
    })
}

/// Inverse-Gamma priors for the home/away model from a complete season.
pub fn extract_priors(prev_season: &SeasonDataset) -> Result<VariancePrior> {
    Ok(ems_statistics(prev_season, TeamModel::HomeAway)?.prior())
}

/// Inverse-Gamma priors for the home-only model from a complete season.
pub fn extract_home_only_priors(prev_season: &SeasonDataset) -> Result<VariancePrior> {
    Ok(ems_statistics(prev_season, TeamModel::HomeOnly)?.prior())
}

/// Intercept plus treatment-coded dummies (first level dropped) per factor.
fn design(n: usize, levels: usize, factors: &[&[usize]]) -> DMatrix<f64> {
    let p = 1 + factors.len() * (levels - 1);
    let mut x = DMatrix::zeros(n, p);
    for r in 0..n {
        x[(r, 0)] = 1.0;
        for (f, col) in factors.iter().enumerate() {
            if col[r] > 0 {
                x[(r, 1 + f * (levels - 1) + col[r] - 1)] = 1.0;
            }
        }
    }
    x
}

fn rss(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<f64> {
    let xtx = x.transpose() * x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Singular("least-squares design is rank deficient".into()))?;
    let beta = chol.solve(&(x.transpose() * y));
    Ok((y - x * beta).norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareModel {
    /// Training-set mean goal difference for every match.
    Intercept,
    HaReml,
    HaMap,
    HomeOnlyReml,
    HomeOnlyMap,
}

impl CompareModel {
    pub const ALL: [CompareModel; 5] = [
        CompareModel::Intercept,
        CompareModel::HaReml,
        CompareModel::HaMap,
        CompareModel::HomeOnlyReml,
        CompareModel::HomeOnlyMap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompareModel::Intercept => "intercept",
            CompareModel::HaReml => "ha_reml",
            CompareModel::HaMap => "ha_map",
            CompareModel::HomeOnlyReml => "home_only_reml",
            CompareModel::HomeOnlyMap => "home_only_map",
        }
    }

    fn parts(self) -> Option<(TeamModel, FitMethod)> {
        match self {
            CompareModel::Intercept => None,
            CompareModel::HaReml => Some((TeamModel::HomeAway, FitMethod::Reml)),
            CompareModel::HaMap => Some((TeamModel::HomeAway, FitMethod::Map)),
            CompareModel::HomeOnlyReml => Some((TeamModel::HomeOnly, FitMethod::Reml)),
            CompareModel::HomeOnlyMap => Some((TeamModel::HomeOnly, FitMethod::Map)),
        }
    }
}

impl std::str::FromStr for CompareModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CompareModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown model `{s}`")))
    }
}

impl std::fmt::Display for CompareModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmsepRow {
    pub season: String,
    pub model: CompareModel,
    pub n_test: usize,
    /// `None` for MAP models without a usable previous season, or an empty test set.
    pub rmsep: Option<f64>,
    /// Mean absolute error of the predicted end-of-season ranks.
    pub rank_mae: Option<f64>,
}

/// Test-set RMSEP of each model on each season after training on the first
/// `h` home games per team. MAP models take their priors from the preceding
/// season in `seasons`.
pub fn rmsep_compare(seasons: &[SeasonDataset], models: &[CompareModel], h: usize) -> Result<Vec<RmsepRow>> {
    let per_season: Vec<Vec<RmsepRow>> = (0..seasons.len())
        .into_par_iter()
        .map(|s| {
            let season = &seasons[s];
            let split = training_split(season, h)?;
            let prev = s.checked_sub(1).map(|p| &seasons[p]);
            models
                .iter()
                .map(|&model| evaluate(season, prev, &split, model))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_season.into_iter().flatten().collect())
}

fn evaluate(
    season: &SeasonDataset,
    prev: Option<&SeasonDataset>,
    split: &TrainingSplit,
    model: CompareModel,
) -> Result<RmsepRow> {
    let mut row = RmsepRow {
        season: season.season_id.clone(),
        model,
        n_test: split.test.len(),
        rmsep: None,
        rank_mae: None,
    };
    let rmsep = |pred: &dyn Fn(&MatchRecord) -> Result<f64>| -> Result<Option<f64>> {
        if split.test.is_empty() {
            return Ok(None);
        }
        let mut ss = 0.0;
        for m in &split.test {
            ss += (pred(m)? - m.goal_diff()).powi(2);
        }
        Ok(Some((ss / split.test.len() as f64).sqrt()))
    };
    let Some((team_model, method)) = model.parts() else {
        if split.train.is_empty() {
            return Ok(row);
        }
        let mean = split.train.iter().map(MatchRecord::goal_diff).sum::<f64>() / split.train.len() as f64;
        row.rmsep = rmsep(&|_| Ok(mean))?;
        return Ok(row);
    };
    let prior = match method {
        FitMethod::Reml => None,
        FitMethod::Map => match prev.map(|p| ems_statistics(p, team_model)) {
            Some(Ok(stats)) => Some(stats.prior()),
            _ => return Ok(row),
        },
    };
    let fit = fit_team_model(&split.train, team_model, method, prior.as_ref())?;
    row.rmsep = rmsep(&|m| predict_goal_diff(&fit, &m.home_team, &m.away_team))?;
    row.rank_mae = Some(season_summary(&fit, split)?.rank_mae);
    Ok(row)
}

/// Averages of RMSEP and ranking MAE per model over the seasons where they exist.
pub fn rmsep_means(rows: &[RmsepRow]) -> Vec<(CompareModel, Option<f64>, Option<f64>)> {
    let models: BTreeSet<CompareModel> = rows.iter().map(|r| r.model).collect();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    models
        .into_iter()
        .map(|m| {
            let of =
                |f: fn(&RmsepRow) -> Option<f64>| mean(rows.iter().filter(|r| r.model == m).filter_map(f).collect());
            (m, of(|r| r.rmsep), of(|r| r.rank_mae))
        })
        .collect()
}

/// Parameters for simulating seasons from the home/away model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLeague {
    pub teams: usize,
    pub mu: f64,
    pub sigma_h: f64,
    pub sigma_a: f64,
    pub sigma_e: f64,
    pub start: NaiveDate,
}

impl SyntheticLeague {
    pub fn new(teams: usize, mu: f64, sigma_h: f64, sigma_a: f64, sigma_e: f64) -> Self {
        Self {
            teams,
            mu,
            sigma_h,
            sigma_a,
            sigma_e,
            start: NaiveDate::from_ymd_opt(2001, 8, 18).expect("valid date"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub home: BTreeMap<String, f64>,
    pub away: BTreeMap<String, f64>,
}

/// Double round robin with goal differences `round(mu + h_i - a_j + e)`.
///
/// Teams are `T01, T02, ...`. The first half follows the circle method with
/// one round per week; the second half replays it with venues swapped. A
/// positive difference becomes `gd-0`, a negative one `0-|gd|`.
pub fn synthetic_season<R: Rng + ?Sized>(
    league: &SyntheticLeague,
    season_id: &str,
    rng: &mut R,
) -> Result<(SeasonDataset, SyntheticTruth)> {
    if league.teams < 2 {
        return domain("a league needs at least 2 teams");
    }
    if [league.sigma_h, league.sigma_a, league.sigma_e]
        .iter()
        .any(|s| !(s.is_finite() && *s >= 0.0))
        || !league.mu.is_finite()
    {
        return domain("mu must be finite and standard deviations nonnegative");
    }
    let width = league.teams.to_string().len().max(2);
    let names: Vec<String> = (1..=league.teams).map(|i| format!("T{i:0width$}")).collect();
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let home: Vec<f64> = (0..league.teams).map(|_| league.sigma_h * normal()).collect();
    let away: Vec<f64> = (0..league.teams).map(|_| league.sigma_a * normal()).collect();

    let rounds = round_robin(league.teams);
    let half = rounds.len();
    let mut matches = Vec::with_capacity(2 * half * (league.teams / 2));
    for leg in 0..2 {
        for (r, round) in rounds.iter().enumerate() {
            let date = league
                .start
                .checked_add_days(Days::new(7 * (leg * half + r) as u64))
                .expect("date in range");
            for &(i, j) in round {
                let (i, j) = if leg == 0 { (i, j) } else { (j, i) };
                let gd = (league.mu + home[i] - away[j] + league.sigma_e * normal()).round();
                matches.push(MatchRecord {
                    date,
                    home_team: names[i].clone(),
                    away_team: names[j].clone(),
                    home_goals: gd.max(0.0) as u32,
                    away_goals: (-gd).max(0.0) as u32,
                });
            }
        }
    }
    let truth = SyntheticTruth {
        home: names.iter().cloned().zip(home).collect(),
        away: names.iter().cloned().zip(away).collect(),
    };
    Ok((SeasonDataset::new(season_id, matches)?, truth))
}

/// Circle-method single round robin as `(home, away)` pairs per round;
/// with an odd count one team sits out each round.
fn round_robin(teams: usize) -> Vec<Vec<(usize, usize)>> {
    let n = teams + teams % 2;
    let mut ring: Vec<usize> = (0..n).collect();
    let mut rounds = Vec::with_capacity(n - 1);
    for r in 0..n - 1 {
        let mut round = Vec::with_capacity(n / 2);
        for k in 0..n / 2 {
            let (a, b) = (ring[k], ring[n - 1 - k]);
            if a >= teams || b >= teams {
                continue;
            }
            // Alternate venues so home and away games interleave for every team.
            let pair = if (k == 0 && r % 2 == 1) || (k > 0 && k % 2 == 1) {
                (b, a)
            } else {
                (a, b)
            };
            round.push(pair);
        }
        rounds.push(round);
        ring[1..].rotate_right(1);
    }
    rounds
}
