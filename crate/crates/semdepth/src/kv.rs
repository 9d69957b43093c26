//! Flat dotted-key text format used by manifests, run configs and
//! checkpoint spec files: one `key = value` per line, `#` comments,
//! duplicate keys rejected. Flat keys diff cleanly across experiment
//! records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("key {key:?}: cannot parse {value:?} as {ty}")]
    Parse { key: String, value: String, ty: &'static str },
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Parsed key/value document with typed accessors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| KvError::Malformed { line: i + 1, text: raw.to_string() })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Malformed { line: i + 1, text: raw.to_string() });
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(KvError::DuplicateKey(key));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, KvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| KvError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::MissingKey(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn require_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, KvError> {
        let value = self.require(key)?;
        value.parse().map_err(|_| KvError::Parse {
            key: key.to_string(),
            value: value.to_string(),
            ty: std::any::type_name::<T>(),
        })
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        match self.get(key) {
            None => Ok(default),
            Some(value) => value.parse().map_err(|_| KvError::Parse {
                key: key.to_string(),
                value: value.to_string(),
                ty: std::any::type_name::<T>(),
            }),
        }
    }

    /// Serializes in sorted key order so emitted files are stable.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), KvError> {
        std::fs::write(path, self.to_text())
            .map_err(|source| KvError::Io { path: path.display().to_string(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_typed_access() {
        let kv = KvMap::parse("# comment\nmodel.variant = M21\ntrain.lr = 0.001\n\n").unwrap();
        assert_eq!(kv.require("model.variant").unwrap(), "M21");
        assert_eq!(kv.require_parsed::<f64>("train.lr").unwrap(), 0.001);
        assert!(kv.require("absent").is_err());
        assert_eq!(kv.parsed_or("absent", 5usize).unwrap(), 5);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(KvMap::parse("a = 1\na = 2"), Err(KvError::DuplicateKey(_))));
        assert!(matches!(KvMap::parse("nonsense"), Err(KvError::Malformed { .. })));
    }

    #[test]
    fn round_trips_sorted() {
        let mut kv = KvMap::new();
        kv.set("b", 2);
        kv.set("a", 1);
        assert_eq!(kv.to_text(), "a = 1\nb = 2\n");
        assert_eq!(KvMap::parse(&kv.to_text()).unwrap(), kv);
    }
}
