//! Flat `key = value` text used for config and synthesis spec files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("key `{key}`: cannot parse `{value}`: {msg}")]
    BadValue { key: String, value: String, msg: String },
}

/// Parsed key-value pairs. Lines starting with `#` and blank lines are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    map: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax { line: i + 1, text: line.into() })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(KvError::Syntax { line: i + 1, text: line.into() });
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.map.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Parses `key` into `slot` if present.
    pub fn read<T>(&self, key: &str, slot: &mut T) -> Result<(), KvError>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.get(key) {
            *slot = v.parse().map_err(|e: T::Err| KvError::BadValue {
                key: key.into(),
                value: v.into(),
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Fails listing every key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<(), KvError> {
        let bad: Vec<String> = self.keys().filter(|k| !known.contains(k)).map(String::from).collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(KvError::UnknownKeys(bad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_read() {
        let kv = KvMap::parse("# comment\nlr = 0.01\n\nepochs=3\n").unwrap();
        let mut lr = 0.0f64;
        let mut epochs = 0usize;
        kv.read("lr", &mut lr).unwrap();
        kv.read("epochs", &mut epochs).unwrap();
        assert_eq!((lr, epochs), (0.01, 3));
        assert!(kv.reject_unknown(&["lr", "epochs"]).is_ok());
        let err = kv.reject_unknown(&["lr"]).unwrap_err();
        assert_eq!(err.to_string(), "unknown keys: epochs");
    }

    #[test]
    fn syntax_and_value_errors() {
        assert!(matches!(KvMap::parse("novalue"), Err(KvError::Syntax { line: 1, .. })));
        let kv = KvMap::parse("epochs = many").unwrap();
        let mut e = 0usize;
        assert!(matches!(kv.read("epochs", &mut e), Err(KvError::BadValue { .. })));
    }
}
