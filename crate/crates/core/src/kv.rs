//! Flat `key = value` text used for config files and checkpoint headers.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored;
//! values may be wrapped in double quotes. Keys must be unique.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(KvError::Syntax { line: i + 1 })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(KvError::Syntax { line: i + 1 });
            }
            let mut value = v.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(KvError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        self.raw(key)
            .map(|v| {
                v.parse().map_err(|_| KvError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        self.get(key)?
            .ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(KvError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_quotes_and_types() {
        let kv = KvMap::parse("# run\n dim = 32\nname = \"a b\"\n\nlr=0.5\n").unwrap();
        assert_eq!(kv.require::<usize>("dim").unwrap(), 32);
        assert_eq!(kv.raw("name"), Some("a b"));
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(kv.get::<f64>("absent").unwrap(), None);
        assert!(matches!(
            kv.require::<u8>("absent"),
            Err(KvError::Missing(_))
        ));
        assert!(matches!(
            kv.get::<usize>("name"),
            Err(KvError::BadValue { .. })
        ));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert_eq!(KvMap::parse("a\n"), Err(KvError::Syntax { line: 1 }));
        assert!(matches!(
            KvMap::parse("a=1\na=2"),
            Err(KvError::Duplicate { line: 2, .. })
        ));
        let kv = KvMap::parse("a=1\nb=2").unwrap();
        assert_eq!(kv.check_keys(&["a"]), Err(KvError::UnknownKey("b".into())));
    }
}
