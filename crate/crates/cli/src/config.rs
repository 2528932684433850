//! Plain-text `key = value` config files. Command-line flags take precedence.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Result;

use crate::exit::invalid;

#[derive(Debug, Default)]
pub struct KeyValues {
    source: Option<PathBuf>,
    // key -> (line number, raw value)
    entries: BTreeMap<String, (usize, String)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl KeyValues {
    /// Loads `path` if given, otherwise an empty set. Keys outside `allowed`
    /// are rejected.
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let kv = Self::parse(&text, Some(path))?;
        kv.check_keys(allowed)?;
        Ok(kv)
    }

    pub fn parse(text: &str, source: Option<&Path>) -> Result<Self> {
        let origin = source.map_or_else(|| "config".to_string(), |p| p.display().to_string());
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("{origin}:{line_no}: expected key = value")))?;
            let key = normalize(key);
            if key.is_empty() {
                return Err(invalid(format!("{origin}:{line_no}: empty key")));
            }
            if entries.insert(key.clone(), (line_no, value.trim().to_string())).is_some() {
                return Err(invalid(format!("{origin}:{line_no}: duplicate key {key:?}")));
            }
        }
        Ok(Self {
            source: source.map(Path::to_path_buf),
            entries,
        })
    }

    fn origin(&self) -> String {
        self.source
            .as_ref()
            .map_or_else(|| "config".to_string(), |p| p.display().to_string())
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if key.contains("token") || key.contains("api-key") || key.contains("secret") {
                return Err(invalid(format!(
                    "{}:{line}: credentials are read from the environment, not config files",
                    self.origin()
                )));
            }
            if !allowed.contains(&key.as_str()) {
                return Err(invalid(format!("{}:{line}: unknown key {key:?}", self.origin())));
            }
        }
        Ok(())
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse()
                .map(Some)
                .map_err(|e| invalid(format!("{}:{line}: {key}: {e}", self.origin()))),
        }
    }

    /// The flag if given, else the config value.
    pub fn or<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// Like [`Self::or`] with a fallback default.
    pub fn or_default<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.or(flag, key)?.unwrap_or(default))
    }

    /// Like [`Self::or`] but the value must be present somewhere.
    pub fn required<T>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.or(flag, key)?
            .ok_or_else(|| invalid(format!("--{key} is required (flag or config file)")))
    }
}
