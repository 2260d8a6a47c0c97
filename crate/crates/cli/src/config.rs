//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Parsed settings of one command. Keys are validated against the
/// command's allowed set before any value is read.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, and a repeated key is an error.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_pair(line).ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            if values.insert(k.clone(), v).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override, replacing any earlier value.
    pub fn set(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = split_pair(pair).ok_or_else(|| CliError::Usage(format!("override {pair:?} is not key=value")))?;
        self.values.insert(k, v);
        Ok(())
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.values.insert(key.to_string(), value.to_string());
        self
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::Usage(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| CliError::Usage(format!("{key} = {v:?}: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.values.get(key).ok_or_else(|| CliError::Usage(format!("missing required key {key}")))?;
        v.parse().map_err(|e| CliError::Usage(format!("{key} = {v:?}: {e}")))
    }

    /// A path that must already exist.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf, CliError> {
        let p: PathBuf = self.require(key)?;
        if !p.exists() {
            return Err(CliError::Usage(format!("{key}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Resolved settings as config text, keys sorted.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn split_pair(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

/// `"0-10, 10-20"` → `[(0, 10), (10, 20)]`.
pub fn parse_bands(s: &str) -> Result<Vec<(f64, f64)>, CliError> {
    let bad = || CliError::Usage(format!("bands {s:?}: expected lo-hi[,lo-hi...]"));
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (lo, hi) = p.trim().split_once('-').ok_or_else(bad)?;
            let (lo, hi): (f64, f64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
            if !(lo < hi) {
                return Err(bad());
            }
            Ok((lo, hi))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::parse("# run\nseed = 3\n\nlr=1e-3  # fast\n").unwrap();
        assert_eq!(c.get("seed", 0u64).unwrap(), 3);
        c.set("seed=5").unwrap();
        assert_eq!(c.get("seed", 0u64).unwrap(), 5);
        assert_eq!(c.get("lr", 0.0f64).unwrap(), 1e-3);
        assert_eq!(c.get("missing", 7usize).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(RunConfig::parse("seed 3").is_err());
        assert!(RunConfig::parse("a = 1\na = 2").is_err());
        assert!(RunConfig::default().set("=1").is_err());
        let c = RunConfig::parse("seed = x").unwrap();
        assert!(c.get("seed", 0u64).is_err());
        assert!(c.check_keys(&["lr"]).is_err());
        assert!(c.check_keys(&["seed"]).is_ok());
    }

    #[test]
    fn bands() {
        assert_eq!(parse_bands("0-10, 10-20.5").unwrap(), vec![(0.0, 10.0), (10.0, 20.5)]);
        assert!(parse_bands("5-1").is_err());
        assert!(parse_bands("").unwrap().is_empty());
    }
}
