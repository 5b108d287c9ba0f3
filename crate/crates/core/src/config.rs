//! Flat `key=value` configuration text.
//!
//! Blank lines and lines starting with `#` are skipped. Every key must be
//! consumed by some configuration section; leftovers are reported as
//! unknown keys rather than silently ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    origin: String,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        Ok(KeyValues {
            entries,
            origin: origin.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn bad(&self, line: usize, key: &str, value: &str, why: impl Display) -> Error {
        Error::Parse {
            path: self.origin.clone(),
            line,
            msg: format!("`{key}` = `{value}`: {why}"),
        }
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.remove(key) else {
            return Ok(None);
        };
        v.parse().map(Some).map_err(|e| self.bad(line, key, &v, e))
    }

    /// Sets `slot` from `key` when the key is present.
    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn set_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.remove(key) else {
            return Ok(());
        };
        let items = v
            .split(',')
            .map(|s| s.trim().parse::<T>())
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| self.bad(line, key, &v, e))?;
        *slot = items;
        Ok(())
    }

    /// Comma-separated list of exactly `N` items.
    pub fn set_array<T: FromStr + Copy, const N: usize>(&mut self, key: &str, slot: &mut [T; N]) -> Result<()>
    where
        T::Err: Display,
    {
        let line = self.entries.get(key).map(|e| e.1).unwrap_or(0);
        let mut items = Vec::new();
        self.set_list(key, &mut items)?;
        if items.is_empty() {
            return Ok(());
        }
        *slot = items
            .try_into()
            .map_err(|v: Vec<T>| self.bad(line, key, &format!("{} items", v.len()), format!("expected {N} values")))?;
        Ok(())
    }

    /// Inclusive range written as `lo,hi`.
    pub fn set_range(&mut self, key: &str, slot: &mut (usize, usize)) -> Result<()> {
        let mut arr = [slot.0, slot.1];
        self.set_array(key, &mut arr)?;
        *slot = (arr[0], arr[1]);
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(k) => Err(Error::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

/// Joins values with commas, the inverse of the list setters.
pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
