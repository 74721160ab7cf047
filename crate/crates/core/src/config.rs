//! Line-oriented `key = value` configuration with `#` comments and dotted keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

fn malformed(detail: String) -> Error {
    Error::Format { what: "config", detail }
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| malformed(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim();
            let valid = !key.is_empty()
                && key.split('.').all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'));
            if !valid {
                return Err(malformed(format!("line {}: invalid key `{key}`", n + 1)));
            }
            map.entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override as given on a command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let parsed = Self::parse(assignment)?;
        if parsed.entries.is_empty() {
            return Err(malformed(format!("empty override `{assignment}`")));
        }
        self.entries.extend(parsed.entries);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| malformed(format!("`{key} = {v}`: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().parse::<T>().map_err(|e| malformed(format!("`{key} = {v}`: {e}"))))
                    .collect()
            })
            .transpose()
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "on" | "yes" | "1") => Ok(true),
            Some("false" | "off" | "no" | "0") => Ok(false),
            Some(other) => Err(malformed(format!("`{key} = {other}`: expected a boolean"))),
        }
    }

    /// Entries whose key starts with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> ConfigMap {
        let lead = format!("{prefix}.");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
            .collect();
        ConfigMap { entries }
    }

    /// Rejects keys under `prefix` that are not in `known`.
    pub fn check_known(&self, prefix: &str, known: &[&str]) -> Result<()> {
        let lead = format!("{prefix}.");
        for key in self.entries.keys() {
            if let Some(rest) = key.strip_prefix(&lead) {
                if !known.contains(&rest) {
                    return Err(malformed(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ConfigMap) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let text = "# model\nmodel.base_channels = 16  # width\n\nnmf.rank=1\nnmf.solver = hals\n";
        let map = ConfigMap::parse(text).unwrap();
        assert_eq!(map.get::<usize>("model.base_channels").unwrap(), Some(16));
        assert_eq!(map.section("nmf").raw("solver"), Some("hals"));
        assert_eq!(ConfigMap::parse(&map.to_text()).unwrap(), map);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(ConfigMap::parse("just words").is_err());
        assert!(ConfigMap::parse("a..b = 1").is_err());
        let map = ConfigMap::parse("x = abc").unwrap();
        assert!(map.get::<usize>("x").is_err());
        assert!(map.get_bool("x", false).is_err());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut map = ConfigMap::parse("train.steps = 10").unwrap();
        map.apply_override("train.steps=20").unwrap();
        assert_eq!(map.get::<usize>("train.steps").unwrap(), Some(20));
        map.set("train.bogus", 1);
        assert!(map.check_known("train", &["steps"]).is_err());
        assert_eq!(map.get_list::<usize>("train.steps").unwrap(), Some(vec![20]));
    }
}
