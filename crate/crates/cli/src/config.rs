//! Declarative "key: value" config files with flag overrides.
//!
//! Every key carries the same name as its command-line flag; a flag given on
//! the command line wins over the file, which wins over the default. Unknown
//! keys are schema errors.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Values a config key can resolve to; `render` feeds the run manifest.
pub trait CfgValue: FromStr + Sized {
    fn render(&self) -> String;
}

impl CfgValue for String {
    fn render(&self) -> String {
        self.clone()
    }
}

impl CfgValue for usize {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl CfgValue for u64 {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl CfgValue for f64 {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl CfgValue for bool {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl CfgValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
}

pub struct Cfg {
    map: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
    /// Fully resolved values, recorded for the run manifest.
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Cfg {
    pub fn empty() -> Self {
        Cfg {
            map: BTreeMap::new(),
            used: RefCell::new(BTreeSet::new()),
            resolved: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut map = BTreeMap::new();
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected `key: value`, got {line:?}",
                    path.display(),
                    lineno + 1
                )
            })?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                bail!("{}:{}: duplicate key {key:?}", path.display(), lineno + 1);
            }
        }
        Ok(Cfg {
            map,
            used: RefCell::new(BTreeSet::new()),
            resolved: RefCell::new(BTreeMap::new()),
        })
    }

    fn file_value<T: CfgValue>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.map.get(key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.to_string());
        raw.parse::<T>()
            .map(Some)
            .map_err(|e| anyhow!("config key {key:?}: {e}"))
    }

    fn record(&self, key: &str, value: &impl CfgValue) {
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.render());
    }

    /// A command-line flag overrides the file, but still consumes the key.
    fn touch(&self, key: &str) {
        if self.map.contains_key(key) {
            self.used.borrow_mut().insert(key.to_string());
        }
    }

    /// flag > config file > default.
    pub fn get<T: CfgValue>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => {
                self.touch(key);
                v
            }
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    /// flag > config file; absent is fine.
    pub fn get_opt<T: CfgValue>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => {
                self.touch(key);
                Some(v)
            }
            None => self.file_value(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    /// flag > config file; missing is a usage error.
    pub fn require<T: CfgValue>(&self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.get_opt(key, flag)?
            .ok_or_else(|| anyhow!("missing required option --{key} (or config key {key:?})"))
    }

    /// Schema check: every file key must have been consumed.
    pub fn ensure_all_used(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !used.contains(*k)).collect();
        if !unknown.is_empty() {
            bail!(
                "unknown config key(s): {}",
                unknown
                    .iter()
                    .map(|s| format!("{s:?}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        Ok(())
    }

    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }
}

/// Comma-separated positive integers ("4,16,32").
pub fn parse_usize_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| anyhow!("bad integer {s:?} in list: {e}"))
        })
        .collect()
}

/// Comma-separated labels ("per:title,org:founded").
pub fn parse_label_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}
