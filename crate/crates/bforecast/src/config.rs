//! INI-style run configuration: `[section]` headers, `key = value` lines,
//! `#`/`;` comments. Environment variables `BF_<SECTION>_<KEY>` override
//! file values so runs can be tweaked without editing configs.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("missing key [{section}] {key}")]
    Missing { section: String, key: String },
    #[error("[{section}] {key} = {value:?}: {message}")]
    BadValue { section: String, key: String, value: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Parsed configuration; sections and keys keep a stable (sorted) order so
/// the archived copy of a resolved config is deterministic.
#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |message: String| ConfigError::Parse {
                path: path.to_string(),
                line: i + 1,
                message,
            };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?
                    .trim();
                if name.is_empty() {
                    return Err(err("empty section name".into()));
                }
                current = name.to_lowercase();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim().to_lowercase();
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if current.is_empty() {
                return Err(err(format!("key {key:?} appears before any [section]")));
            }
            sections.get_mut(&current).unwrap().insert(key, value.trim().to_string());
        }
        Ok(Config { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.apply_env(std::env::vars());
        Ok(cfg)
    }

    /// Fold `BF_<SECTION>_<KEY>` variables in. The key part may itself
    /// contain underscores; the section is the first `_`-delimited token.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("BF_") else { continue };
            let Some((section, key)) = rest.split_once('_') else { continue };
            if section.is_empty() || key.is_empty() {
                continue;
            }
            self.sections
                .entry(section.to_lowercase())
                .or_default()
                .insert(key.to_lowercase(), value);
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| ConfigError::Missing {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    fn typed<T: std::str::FromStr>(&self, section: &str, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                value: v.to_string(),
                message: format!("expected {what}"),
            }),
        }
    }

    pub fn get_usize(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        Ok(self.typed(section, key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn get_u64(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        Ok(self.typed(section, key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn get_f64(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        Ok(self.typed(section, key, "a number")?.unwrap_or(default))
    }

    pub fn get_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                value: v.to_string(),
                message: "expected true/false".into(),
            }),
        }
    }

    /// Comma-separated list of unsigned integers.
    pub fn get_usize_list(&self, section: &str, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(section, key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| ConfigError::BadValue {
                    section: section.to_string(),
                    key: key.to_string(),
                    value: v.to_string(),
                    message: "expected comma-separated unsigned integers".into(),
                }),
        }
    }

    /// Render the resolved config (file plus env overrides) for archival
    /// next to a run's outputs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (section, keys) in &self.sections {
            out.push_str(&format!("[{section}]\n"));
            for (key, value) in keys {
                out.push_str(&format!("{key} = {value}\n"));
            }
            out.push('\n');
        }
        out
    }
}
