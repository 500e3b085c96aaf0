use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Parameters `(t, k, r, n, lambda)` of a balanced block design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BibdSpec {
    pub t: usize,
    pub k: usize,
    pub r: usize,
    pub n: usize,
    pub lambda: usize,
}

impl BibdSpec {
    pub fn is_complete(&self) -> bool {
        self.k == self.t
    }

    pub fn total_size(&self) -> usize {
        self.n * self.k
    }
}

/// Completes `(t, k, r)` with `n = rt/k` and `lambda = r(k-1)/(t-1)`.
pub fn complete_bibd_spec(t: usize, k: usize, r: usize) -> Result<BibdSpec> {
    if t < 2 || k < 2 || k > t || r < 1 {
        return domain(format!("need t >= 2, 2 <= k <= t, r >= 1; got t={t}, k={k}, r={r}"));
    }
    if (r * t) % k != 0 {
        return Err(Error::Infeasible(format!(
            "n = rt/k = {}/{} is not an integer (identity n k = r t)",
            r * t,
            k
        )));
    }
    if (r * (k - 1)) % (t - 1) != 0 {
        return Err(Error::Infeasible(format!(
            "lambda = r(k-1)/(t-1) = {}/{} is not an integer (identity lambda (t-1) = r (k-1))",
            r * (k - 1),
            t - 1
        )));
    }
    Ok(BibdSpec {
        t,
        k,
        r,
        n: r * t / k,
        lambda: r * (k - 1) / (t - 1),
    })
}

/// Randomized complete block design with `n` blocks.
pub fn rcbd_spec(t: usize, n: usize) -> Result<BibdSpec> {
    complete_bibd_spec(t, t, n)
}

/// Blocks of 0-based treatment indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DesignLayout {
    spec: BibdSpec,
    blocks: Vec<Vec<usize>>,
}

impl DesignLayout {
    /// Validates `blocks` against every replication and concurrence count in `spec`.
    pub fn new(spec: BibdSpec, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let check = complete_bibd_spec(spec.t, spec.k, spec.r)?;
        if check != spec {
            return Err(Error::Infeasible(format!("inconsistent parameters {spec:?}")));
        }
        if blocks.len() != spec.n {
            return Err(Error::Infeasible(format!(
                "expected {} blocks, found {}",
                spec.n,
                blocks.len()
            )));
        }
        let t = spec.t;
        let mut reps = vec![0usize; t];
        let mut pairs = vec![0usize; t * t];
        for (j, b) in blocks.iter().enumerate() {
            if b.len() != spec.k {
                return Err(Error::Infeasible(format!(
                    "block {} has size {}, expected {}",
                    j + 1,
                    b.len(),
                    spec.k
                )));
            }
            for (x, &i) in b.iter().enumerate() {
                if i >= t {
                    return Err(Error::Infeasible(format!(
                        "block {} has treatment {} > t = {t}",
                        j + 1,
                        i + 1
                    )));
                }
                if b[..x].contains(&i) {
                    return Err(Error::Infeasible(format!(
                        "block {} repeats treatment {}",
                        j + 1,
                        i + 1
                    )));
                }
                reps[i] += 1;
                for &h in &b[..x] {
                    pairs[i * t + h] += 1;
                    pairs[h * t + i] += 1;
                }
            }
        }
        if let Some(i) = reps.iter().position(|&c| c != spec.r) {
            return Err(Error::Infeasible(format!(
                "treatment {} appears in {} blocks, expected r = {}",
                i + 1,
                reps[i],
                spec.r
            )));
        }
        for i in 0..t {
            for h in 0..i {
                if pairs[i * t + h] != spec.lambda {
                    return Err(Error::Infeasible(format!(
                        "treatments {} and {} share {} blocks, expected lambda = {}",
                        h + 1,
                        i + 1,
                        pairs[i * t + h],
                        spec.lambda
                    )));
                }
            }
        }
        Ok(Self { spec, blocks })
    }

    pub fn spec(&self) -> &BibdSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Parses one block per line of comma-separated 1-based indices and
    /// infers the parameters from the blocks.
    pub fn parse(text: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let block = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&v| v >= 1)
                        .map(|v| v - 1)
                        .ok_or_else(|| Error::Parse {
                            line: no + 1,
                            msg: format!("`{}` is not a positive treatment index", f.trim()),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(block);
        }
        let Some(first) = blocks.first() else {
            return Err(Error::Parse {
                line: 0,
                msg: "layout has no blocks".into(),
            });
        };
        let k = first.len();
        let t = blocks.iter().flatten().max().map_or(0, |m| m + 1);
        let n = blocks.len();
        if t == 0 || (n * k) % t != 0 {
            return Err(Error::Infeasible(format!(
                "{n} blocks of size {k} cannot replicate {t} treatments equally"
            )));
        }
        let spec = complete_bibd_spec(t, k, n * k / t)?;
        Self::new(spec, blocks)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let line: Vec<String> = b.iter().map(|i| (i + 1).to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
