use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// Where and how a subcommand writes its files.
pub struct Run {
    pub out: PathBuf,
    pub invocation: String,
    /// `None` for subcommands that draw no random numbers.
    pub seed: Option<u64>,
}

impl Run {
    pub fn new(out: PathBuf, invocation: String, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self { out, invocation, seed })
    }

    fn seed_text(&self) -> String {
        self.seed.map_or_else(|| "none".to_string(), |s| s.to_string())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Opens `name` for writing and emits the `# <invocation> seed=<seed>` line.
    pub fn text_file(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# {} seed={}", self.invocation, self.seed_text())?;
        Ok(w)
    }

    /// Writes a CSV file through `body`, which receives a writer positioned
    /// after the comment line.
    pub fn csv<F>(&self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let mut w = self.text_file(name)?;
        body(&mut w)?;
        w.flush()?;
        Ok(self.path(name))
    }

    /// JSON cannot carry a comment line, so the invocation and seed become
    /// `invocation` and `seed` fields of the top-level object.
    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut map = serde_json::Map::new();
        map.insert("invocation".into(), Value::String(self.invocation.clone()));
        map.insert("seed".into(), self.seed.map_or(Value::Null, Value::from));
        match serde_json::to_value(value)? {
            Value::Object(fields) => map.extend(fields),
            other => {
                map.insert("result".into(), other);
            }
        }
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(&Value::Object(map))?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Shell-style rendering of the argument list, quoting only where needed.
pub fn invocation(args: &[String]) -> String {
    let quote = |a: &String| {
        if !a.is_empty() && a.chars().all(|c| c.is_ascii_alphanumeric() || "-_.,:=/+".contains(c)) {
            a.clone()
        } else {
            format!("'{}'", a.replace('\'', r"'\''"))
        }
    };
    std::iter::once("mixshrink".to_string())
        .chain(args.iter().map(quote))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}
