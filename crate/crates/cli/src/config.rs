//! Flat `key = value` configuration files.
//!
//! Keys are dotted (`process.family`, `eb.sigma`); `[section]` headers
//! prefix the keys that follow them. `#` starts a comment. Every lookup
//! marks its key as used so that typos can be reported.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn err(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(&format!("line {}", lineno + 1), format!("expected `key = value`, found `{line}`")));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(err(&format!("line {}", lineno + 1), "empty key"));
            }
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(err(&key, "key given twice"));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn str(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key).ok_or_else(|| err(key, "missing"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.str(key)?;
        v.parse().map_err(|e| err(key, format!("cannot parse `{v}`: {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| err(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    /// A comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let v = self.str(key)?;
        v.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse().map_err(|e| err(key, format!("cannot parse list item `{item}`: {e}")))
            })
            .collect()
    }

    /// Keys present in the file that no lookup asked for.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &String)> {
        self.entries.iter()
    }

    pub fn error(&self, key: &str, message: impl Into<String>) -> CliError {
        err(key, message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let c = Config::parse("a = 1 # one\n[process]\nfamily = besq\n\n# done\n").unwrap();
        assert_eq!(c.get::<i32>("a").unwrap(), 1);
        assert_eq!(c.str("process.family").unwrap(), "besq");
    }

    #[test]
    fn floats_round_trip_bit_exactly() {
        let x = 0.1f64 + 0.2;
        let c = Config::parse(&format!("x = {x}")).unwrap();
        assert_eq!(c.get::<f64>("x").unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn errors_name_the_key() {
        let c = Config::parse("n = ten").unwrap();
        match c.get::<usize>("n") {
            Err(CliError::Config { key, .. }) => assert_eq!(key, "n"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Config::parse("novalue"), Err(CliError::Config { .. })));
        assert!(matches!(Config::parse("a=1\na=2"), Err(CliError::Config { key, .. }) if key == "a"));
    }

    #[test]
    fn lists_and_unused_keys() {
        let c = Config::parse("xs = 1, 2.5 ,3\ntypo = 1").unwrap();
        assert_eq!(c.list::<f64>("xs").unwrap(), vec![1.0, 2.5, 3.0]);
        assert_eq!(c.unused(), vec!["typo".to_string()]);
    }
}
