//! `key = value` configuration files with `#` comments and `[section]`
//! headers. Keys before the first header belong to the unnamed section.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        cfg.sections.entry(section.clone()).or_default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", lineno + 1)))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {}: empty section name", lineno + 1)));
                }
                section = name.to_string();
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            let entries = cfg.sections.entry(section.clone()).or_default();
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(section, key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{}: invalid value {v:?}: {e}", qualified(section, key))))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value gives an empty list.
    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.raw(section, key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| Error::Config(format!("{}: invalid item {s:?}: {e}", qualified(section, key))))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Rejects sections and keys outside `known`.
    pub fn check_known(&self, known: &[(&str, &[&str])]) -> Result<()> {
        for (section, entries) in &self.sections {
            let Some((_, keys)) = known.iter().find(|(s, _)| s == section) else {
                if entries.is_empty() && section.is_empty() {
                    continue;
                }
                return Err(Error::Config(format!("unknown section [{section}]")));
            };
            if let Some(k) = entries.keys().find(|k| !keys.contains(&k.as_str())) {
                return Err(Error::Config(format!("unknown key {}", qualified(section, k))));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = Config::parse(
            "seed = 7  # top\n\n[train]\n# comment\nepochs=20\nrates = 0.1, 0.01\n[data]\nsource = two_moons\n",
        )
        .unwrap();
        assert_eq!(cfg.get::<u64>("", "seed").unwrap(), Some(7));
        assert_eq!(cfg.get::<usize>("train", "epochs").unwrap(), Some(20));
        assert_eq!(cfg.list::<f64>("train", "rates").unwrap(), Some(vec![0.1, 0.01]));
        assert_eq!(cfg.raw("data", "source"), Some("two_moons"));
        assert_eq!(cfg.get_or("train", "missing", 3usize).unwrap(), 3);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("[open\n").is_err());
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("= 1\n").is_err());
    }

    #[test]
    fn typed_errors_name_the_key() {
        let cfg = Config::parse("[train]\nepochs = many\n").unwrap();
        let err = cfg.get::<usize>("train", "epochs").unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let cfg = Config::parse("[train]\nepochz = 3\n").unwrap();
        assert!(cfg.check_known(&[("", &[]), ("train", &["epochs"])]).is_err());
        let cfg = Config::parse("[other]\n").unwrap();
        assert!(cfg.check_known(&[("", &[]), ("train", &["epochs"])]).is_err());
    }
}
