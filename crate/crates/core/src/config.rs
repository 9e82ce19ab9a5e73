//! Flat `key = value` configuration files. Blank lines and lines starting
//! with `#` are ignored; later keys override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("key=value file", format!("line {}: missing `=`", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format(
                    "key=value file",
                    format!("line {}: empty key", lineno + 1),
                ));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &'static str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::validation(key, format!("cannot parse `{v}`"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &'static str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn require<T: FromStr>(&self, key: &'static str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::validation(key, "missing required key"))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Entries whose key starts with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let p = format!("{prefix}.");
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> KeyValues {
        KeyValues {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_lookup() {
        let kv = KeyValues::parse("# comment\nrib_count = 4\n\ngap_width=30.5\nrib_count=5\n").unwrap();
        assert_eq!(kv.get::<usize>("rib_count").unwrap(), Some(5));
        assert_eq!(kv.get::<f64>("gap_width").unwrap(), Some(30.5));
        assert_eq!(kv.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn bad_value_names_key() {
        let kv = KeyValues::parse("rib_count = four").unwrap();
        let err = kv.get::<usize>("rib_count").unwrap_err();
        assert!(err.to_string().contains("rib_count"));
    }

    #[test]
    fn missing_equals_is_rejected() {
        assert!(KeyValues::parse("rib_count 4").is_err());
    }

    #[test]
    fn sections() {
        let kv = KeyValues::parse("phantom.gap_width=20\ncpd.w=0.2\n").unwrap();
        let s = kv.section("phantom");
        assert_eq!(s.get::<f64>("gap_width").unwrap(), Some(20.0));
        assert_eq!(s.keys().count(), 1);
    }
}
