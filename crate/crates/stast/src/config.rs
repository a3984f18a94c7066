//! `key = value` configuration files, and the config dump every run emits
//! so it can be reproduced bit-exactly.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Flat key/value settings, insertion-ordered. Later assignments win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    map: IndexMap<String, String>,
}

impl Settings {
    pub fn parse(body: &str, origin: &str) -> Result<Settings> {
        let mut map = IndexMap::new();
        for (lineno, line) in body.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                message: format!("expected key = value, got {trimmed:?}"),
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Settings { map })
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Settings::parse(&body, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    /// Typed lookup; absent keys yield `default`.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("setting {key} = {raw:?} is not a valid value"))
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Render back to the file format.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.dump()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
