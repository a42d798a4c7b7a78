//! Flat `key = value` config files with `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Line { path: PathBuf, line: usize, msg: String },
}

#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    path: PathBuf,
    /// key -> (raw value, 1-based line)
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.into(), source: e })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let err = |line: usize, msg: String| ConfigError::Line { path: path.into(), line, msg };
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(err(line, "empty key".into()));
            }
            if let Some((_, first)) = entries.insert(key.to_string(), (value.to_string(), line)) {
                return Err(err(line, format!("duplicate key `{key}` (first set on line {first})")));
            }
        }
        Ok(Self { path: path.into(), entries })
    }

    /// Fails on the first key (by line) that is not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        let mut unknown: Vec<(&String, usize)> =
            self.entries.iter().filter(|(k, _)| !allowed.contains(&k.as_str())).map(|(k, (_, l))| (k, *l)).collect();
        unknown.sort_by_key(|(_, l)| *l);
        match unknown.first() {
            Some((key, line)) => Err(ConfigError::Line {
                path: self.path.clone(),
                line: *line,
                msg: format!("unknown key `{key}`; allowed keys: {}", allowed.join(", ")),
            }),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((raw, line)) => raw.parse().map(Some).map_err(|e: T::Err| ConfigError::Line {
                path: self.path.clone(),
                line: *line,
                msg: format!("invalid value `{raw}` for `{key}`: {e}"),
            }),
        }
    }
}

/// Flag value if given, else the config value, else `default`.
pub fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}
