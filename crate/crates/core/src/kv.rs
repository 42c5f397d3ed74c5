//! Flat `key=value` text, shared by checkpoint headers and run config files.
//!
//! One pair per line. Blank lines and lines starting with `#` are ignored.
//! Keys keep their first-seen order so serialized output is stable.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{LvitError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LvitError::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(LvitError::Config(format!("line {}: empty key", n + 1)));
            }
            map.set(k, v.trim());
        }
        Ok(map)
    }

    /// Insert or overwrite, keeping the original position of an existing key.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    /// Parse a typed value if the key is present.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| LvitError::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get_parsed(key)?.ok_or_else(|| LvitError::Config(format!("missing key `{key}`")))
    }

    /// Overlay every entry of `other` onto `self`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_serializes() {
        let m = KvMap::parse("# run\na=1\n\n b = two words \nc=x=y\n").unwrap();
        assert_eq!(m.get("b"), Some("two words"));
        assert_eq!(m.get("c"), Some("x=y"));
        assert_eq!(m.require::<u32>("a").unwrap(), 1);
        assert!(m.require::<u32>("b").is_err());
        assert_eq!(KvMap::parse(&m.to_text()).unwrap(), m);
        assert!(KvMap::parse("novalue\n").is_err());
    }

    #[test]
    fn merge_overrides_in_place() {
        let mut base = KvMap::parse("a=1\nb=2\n").unwrap();
        base.merge(&KvMap::parse("b=3\nc=4\n").unwrap());
        assert_eq!(base.to_text(), "a=1\nb=3\nc=4\n");
    }
}
