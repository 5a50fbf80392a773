//! Plain-text configuration: `[section]` headers over `key = value` lines.
//!
//! The format is deliberately minimal — flat sections, string keys, one
//! value per key, `#` comments — so that run configurations diff cleanly in
//! ablation logs. Parsing is total: the result is either a complete config
//! or an error naming the offending line or key; unknown keys are rejected
//! rather than ignored, so a typo cannot silently fall back to a default.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `[section]` blocks of ordered `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sections {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Sections {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a section; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, pairs: Vec<(String, String)>) -> Result<()> {
        let name = name.into();
        if self.sections.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate section [{name}]")));
        }
        self.sections.push((name, pairs));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_slice())
    }

    /// Parse config text. Errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Sections::new();
        let mut current: Option<(String, Vec<(String, String)>)> = None;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {lineno}: unterminated section header {line:?}")))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {lineno}: empty section name")));
                }
                if let Some(done) = current.take() {
                    out.push(done.0, done.1)?;
                }
                current = Some((name.to_string(), Vec::new()));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            let section = current
                .as_mut()
                .ok_or_else(|| Error::Config(format!("line {lineno}: `{key}` appears before any [section]")))?;
            if section.1.iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!("line {lineno}: duplicate key `{key}` in [{}]", section.0)));
            }
            section.1.push((key.to_string(), value.to_string()));
        }
        if let Some(done) = current.take() {
            out.push(done.0, done.1)?;
        }
        Ok(out)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (name, pairs) in &self.sections {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Typed, consume-tracking view of one section's pairs. Every key must be
/// taken exactly once; [`KvReader::finish`] rejects leftovers as unknown.
pub struct KvReader<'a> {
    section: &'a str,
    pairs: &'a [(String, String)],
    taken: HashSet<&'a str>,
}

impl<'a> KvReader<'a> {
    pub fn new(section: &'a str, pairs: &'a [(String, String)]) -> Self {
        KvReader { section, pairs, taken: HashSet::new() }
    }

    /// Reader over a section that may be absent (all defaults apply).
    pub fn over(sections: &'a Sections, name: &'a str) -> Self {
        KvReader::new(name, sections.get(name).unwrap_or(&[]))
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        let found = self.pairs.iter().find(|(k, _)| k == key)?;
        self.taken.insert(found.0.as_str());
        Some(found.1.as_str())
    }

    /// Parse `key` if present, else fall back to `default`.
    pub fn parse_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|_| {
                Error::Config(format!("[{}] {key}: cannot parse {v:?}", self.section))
            }),
        }
    }

    /// Parse a comma-separated list if present.
    pub fn parse_list_or<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse::<T>().map_err(|_| {
                        Error::Config(format!("[{}] {key}: cannot parse list item {item:?}", self.section))
                    })
                })
                .collect(),
        }
    }

    /// Error on any key that was never taken.
    pub fn finish(self) -> Result<()> {
        for (k, _) in self.pairs {
            if !self.taken.contains(k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}` in [{}]", self.section)));
            }
        }
        Ok(())
    }
}

/// Render a float so that parse-back is exact (shortest round-trip form).
pub fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().ok(), Some(v));
    s
}
