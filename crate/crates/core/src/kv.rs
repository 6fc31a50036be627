//! Flat `key=value` documents: one pair per line, `#` starts a comment.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    pairs: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_pair(line).map_err(|_| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            doc.push(k, v);
        }
        Ok(doc)
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.pairs.push((key.into(), value.to_string()));
    }

    /// Last value recorded for `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn extend(&mut self, other: &KvDoc) {
        self.pairs.extend(other.pairs.iter().cloned());
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key).map(|v| parse_value(key, v)).transpose()
    }
}

impl std::fmt::Display for KvDoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.pairs {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Splits `key=value`, trimming both sides.
pub fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in {s:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

pub fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

pub fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse_value(key, s.trim())).collect()
}

pub fn join_list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// A configuration that can be read from and written to a [`KvDoc`].
pub trait KvConfig {
    /// Applies one pair. Returns `Ok(false)` when the key is not recognised.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    fn to_kv(&self) -> KvDoc;

    /// Applies every pair, rejecting unknown keys.
    fn apply(&mut self, doc: &KvDoc) -> Result<()> {
        for (k, v) in doc.iter() {
            if !self.set(k, v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        Ok(())
    }
}
