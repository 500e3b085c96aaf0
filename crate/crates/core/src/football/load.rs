use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;

use super::{MatchRecord, SeasonDataset};
use crate::error::{domain, Error, Result};

const FIELDS: [&str; 6] = ["season", "date", "home_team", "away_team", "home_goals", "away_goals"];
/// Column names in the public football-results files.
const RESULTS_NAMES: [&str; 6] = ["Season", "Date", "HomeTeam", "AwayTeam", "FTHG", "FTAG"];
const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d", "%d/%m/%Y", "%d/%m/%y"];

/// Overrides for the input column names, read from `field=column` lines.
///
/// Recognised keys are the native field names plus `date_format`
/// (a chrono format string).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColumnMap {
    columns: BTreeMap<String, String>,
    date_format: Option<String>,
}

impl ColumnMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim().to_string());
            if key == "date_format" {
                map.date_format = Some(value);
            } else if FIELDS.contains(&key) {
                map.columns.insert(key.to_string(), value);
            } else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!(
                        "unknown key `{key}`; expected one of {} or date_format",
                        FIELDS.join(", ")
                    ),
                });
            }
        }
        Ok(map)
    }

    pub fn with_column(mut self, field: &str, column: impl Into<String>) -> Self {
        self.columns.insert(field.to_string(), column.into());
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Season label for files without a season column.
    pub season: Option<String>,
    pub mapping: ColumnMap,
}

/// Reads match results and groups them into seasons ordered by first date.
///
/// Accepts the native header `season,date,home_team,away_team,home_goals,away_goals`
/// or the results-file header `Date,HomeTeam,AwayTeam,FTHG,FTAG`; other
/// columns are ignored. Blank rows are skipped.
pub fn load_matches<R: Read>(reader: R, options: &LoadOptions) -> Result<Vec<SeasonDataset>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().all(str::is_empty) {
        return Ok(Vec::new());
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let mut cols = [None; 6];
    for (k, field) in FIELDS.iter().enumerate() {
        cols[k] = match options.mapping.columns.get(*field) {
            Some(name) => Some(find(name).ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("mapped column `{name}` for {field} is not in the header"),
            })?),
            None => find(field).or_else(|| find(RESULTS_NAMES[k])),
        };
    }
    for k in 1..6 {
        if cols[k].is_none() {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "no column for {} (expected `{}` or `{}`)",
                    FIELDS[k], FIELDS[k], RESULTS_NAMES[k]
                ),
            });
        }
    }
    if cols[0].is_none() && options.season.is_none() {
        return domain("file has no season column; supply the season label");
    }

    let mut seasons: BTreeMap<String, Vec<MatchRecord>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let err = |msg: String| Error::Parse { line, msg };
        let get = |k: usize| -> Result<&str> {
            let c = cols[k].expect("checked above");
            record
                .get(c)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| err(format!("missing {}", FIELDS[k])))
        };
        let season = match (options.season.as_ref(), cols[0]) {
            (_, Some(_)) => get(0)?.to_string(),
            (Some(s), None) => s.clone(),
            (None, None) => unreachable!(),
        };
        let date = parse_date(get(1)?, options.mapping.date_format.as_deref()).map_err(err)?;
        let goals = |k: usize| -> Result<u32> {
            let s = get(k)?;
            s.parse()
                .map_err(|_| err(format!("{} `{s}` is not a nonnegative integer", FIELDS[k])))
        };
        let m = MatchRecord {
            date,
            home_team: get(2)?.to_string(),
            away_team: get(3)?.to_string(),
            home_goals: goals(4)?,
            away_goals: goals(5)?,
        };
        if m.home_team == m.away_team {
            return Err(err(format!("team `{}` listed as both home and away", m.home_team)));
        }
        seasons.entry(season).or_default().push(m);
    }
    let mut out = seasons
        .into_iter()
        .map(|(id, matches)| SeasonDataset::new(id, matches))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        let first = |s: &SeasonDataset| s.matches.first().map(|m| m.date);
        first(a).cmp(&first(b)).then_with(|| a.season_id.cmp(&b.season_id))
    });
    Ok(out)
}

fn parse_date(s: &str, format: Option<&str>) -> std::result::Result<NaiveDate, String> {
    if let Some(f) = format {
        return NaiveDate::parse_from_str(s, f).map_err(|e| format!("date `{s}` does not match `{f}`: {e}"));
    }
    DATE_FORMATS
        .iter()
        .find_map(|f| {
            // `%Y` also accepts two digits (year 0018), so pick by year width.
            let two_digit = s.contains('/') && s.rsplit('/').next().is_some_and(|y| y.len() == 2);
            if (*f == "%d/%m/%y") != two_digit && f.contains('/') {
                return None;
            }
            NaiveDate::parse_from_str(s, f).ok()
        })
        .ok_or_else(|| format!("date `{s}` is neither yyyy-mm-dd, dd/mm/yyyy nor dd/mm/yy"))
}

/// Writes seasons in the native format.
pub fn write_matches<W: Write>(writer: W, seasons: &[SeasonDataset]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FIELDS)?;
    for s in seasons {
        for m in &s.matches {
            w.write_record([
                s.season_id.as_str(),
                &m.date.format("%Y-%m-%d").to_string(),
                &m.home_team,
                &m.away_team,
                &m.home_goals.to_string(),
                &m.away_goals.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
