//! `key = value` text used by run configs and checkpoint configs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("{source}:{}: expected key = value", n + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("{source}:{}: empty key", n + 1)));
            }
            if kv.map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("{source}:{}: duplicate key {k}", n + 1)));
            }
        }
        Ok(kv)
    }

    /// Parse a single `key=value` override.
    pub fn parse_override(s: &str) -> Result<(String, String)> {
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(Error::Config(format!("override {s:?} is not key=value"))),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.map.insert(key.into(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))))
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    /// Overwrite `*slot` when `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim().parse::<T>().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> KeyValues {
        KeyValues {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_roundtrip() {
        let kv = KeyValues::parse("# c\nseed = 42\n\nname=a b\nxs = 1, 2,3\n", "t").unwrap();
        assert_eq!(kv.require::<u64>("seed").unwrap(), 42);
        assert_eq!(kv.raw("name"), Some("a b"));
        assert_eq!(kv.get_list::<u32>("xs").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(KeyValues::parse(&kv.to_text(), "t").unwrap(), kv);
        let sub = KeyValues::parse("a.x = 1\nb.y = 2\na.z = 3\n", "t").unwrap().with_prefix("a.");
        assert_eq!(sub.keys().collect::<Vec<_>>(), ["x", "z"]);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(KeyValues::parse("novalue\n", "t").is_err());
        assert!(KeyValues::parse("a=1\na=2\n", "t").is_err());
        assert!(KeyValues::parse("seed = x\n", "t").unwrap().get::<u64>("seed").is_err());
        assert!(KeyValues::parse_override("=3").is_err());
    }
}
