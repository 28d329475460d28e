//! Key-value run configuration: built-in defaults, then an optional file,
//! then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data_dir", "data"),
    ("out_dir", "out"),
    ("dim", "300"),
    ("steps", "8"),
    ("ablation", "full"),
    ("split", "iid"),
    ("holdout", ""),
    ("n_scenes", "1000"),
    ("n_questions", "5000"),
    ("templates", ""),
    ("embedding_std", "0.1"),
    ("dense_features", "true"),
    ("learning_rate", "0.0001"),
    ("batch_size", "64"),
    ("ema_decay", "0.999"),
    ("dropout", "0.15"),
    ("grad_clip_norm", "5"),
    ("max_epochs", "50"),
    ("patience", "5"),
    ("validation_fraction", "0.1"),
    ("steps_sweep", ""),
    ("seeds", "1"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn defaults() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
            out.push((normalize(k), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn apply(&mut self, pairs: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (k, v) in pairs {
            let k = normalize(&k);
            if !self.values.contains_key(&k) {
                bail!("unknown configuration key `{k}`");
            }
            self.values.insert(k, v);
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply(Self::parse(&text)?)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no default for `{key}`"))
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| anyhow!("configuration `{key} = {v}`: {e}"))
    }

    /// Comma-separated list; empty string is the empty list.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn list_of<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.list(key)
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| anyhow!("configuration `{key}` entry `{s}`: {e}"))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
