use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::error::{domain, Error, Result};

/// Long-format observations: one response per row plus a level label for
/// every declared factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    factors: Vec<String>,
    responses: Vec<f64>,
    levels: Vec<Vec<String>>,
}

impl ObservationTable {
    pub fn new<S: Into<String>>(factors: impl IntoIterator<Item = S>) -> Result<Self> {
        let factors: Vec<String> = factors.into_iter().map(Into::into).collect();
        let unique: BTreeSet<&String> = factors.iter().collect();
        if unique.len() != factors.len() {
            return domain("factor names must be unique");
        }
        if factors.iter().any(|f| f.is_empty() || f == "response") {
            return domain("factor names must be nonempty and differ from `response`");
        }
        Ok(Self {
            factors,
            responses: Vec::new(),
            levels: Vec::new(),
        })
    }

    pub fn push<S: AsRef<str>>(&mut self, response: f64, levels: &[S]) -> Result<()> {
        if !response.is_finite() {
            return domain("responses must be finite");
        }
        if levels.len() != self.factors.len() {
            return domain(format!(
                "row carries {} levels but {} factors are declared",
                levels.len(),
                self.factors.len()
            ));
        }
        self.responses.push(response);
        self.levels
            .push(levels.iter().map(|s| s.as_ref().to_string()).collect());
        Ok(())
    }

    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn factor_index(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Domain(format!("unknown factor `{name}`")))
    }

    /// Level label of `row` for factor number `factor`.
    pub fn level(&self, row: usize, factor: usize) -> &str {
        &self.levels[row][factor]
    }

    /// Distinct levels of a factor in natural order.
    pub fn levels_of(&self, factor: usize) -> Vec<String> {
        let set: BTreeSet<&str> = self.levels.iter().map(|r| r[factor].as_str()).collect();
        let mut out: Vec<String> = set.into_iter().map(str::to_string).collect();
        out.sort_by(|a, b| natural_cmp(a, b));
        out
    }

    /// Copy with rows reordered by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            factors: self.factors.clone(),
            responses: order.iter().map(|&i| self.responses[i]).collect(),
            levels: order.iter().map(|&i| self.levels[i].clone()).collect(),
        }
    }

    /// Copy with `c` added to every response.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.responses.iter_mut().for_each(|y| *y += c);
        out
    }

    /// Reads CSV with header `response,<factor1>,...`. Lines starting with `#` are skipped.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("response") {
            return Err(Error::Parse {
                line: 1,
                msg: "first column must be `response`".into(),
            });
        }
        let mut table = Self::new(header.iter().skip(1))?;
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.len() != header.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            let response: f64 = record[0].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("response `{}` is not a number", &record[0]),
            })?;
            let levels: Vec<&str> = record.iter().skip(1).collect();
            table.push(response, &levels).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        }
        if table.is_empty() {
            return domain("observation table has no rows");
        }
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["response".to_string()];
        header.extend(self.factors.iter().cloned());
        w.write_record(&header)?;
        for (y, levels) in self.responses.iter().zip(&self.levels) {
            let mut rec = vec![format!("{y}")];
            rec.extend(levels.iter().cloned());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Orders labels numerically when both parse as integers, lexically otherwise.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = ObservationTable::new(["treatment", "block"]).unwrap();
        t.push(1.5, &["1", "a"]).unwrap();
        t.push(-2.0, &["10", "b"]).unwrap();
        t.push(0.25, &["2", "a"]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("response,treatment,block\n"));
        let back = ObservationTable::read_csv(&buf[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.levels_of(0), vec!["1", "2", "10"]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "# comment\nresponse,g\n1.0,a\nxyz,b\n";
        match ObservationTable::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ObservationTable::read_csv("y,g\n1,a\n".as_bytes()).is_err());
        assert!(ObservationTable::read_csv("response,g\n".as_bytes()).is_err());
    }

    #[test]
    fn rejects_bad_rows() {
        let mut t = ObservationTable::new(["g"]).unwrap();
        assert!(t.push(f64::NAN, &["a"]).is_err());
        assert!(t.push(1.0, &["a", "b"]).is_err());
        assert!(ObservationTable::new(["g", "g"]).is_err());
    }
}
