//! The flat `key = value` configuration dialect shared by every config type.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Lists
//! are comma separated (`cstf_layers = 4,7,10`); an empty list is written as
//! an empty value or `none`.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CfbtError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// A config struct that can absorb entries of the dialect.
pub trait KvConfig {
    /// Applies one entry. Returns `Ok(false)` when the key is not recognised.
    fn apply(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Resolved entries, in documented order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

pub fn parse_str(text: &str) -> Result<Vec<KvEntry>> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CfbtError::Config(format!(
                "line {}: expected `key = value`, got `{}`",
                idx + 1,
                raw.trim()
            )));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(CfbtError::Config(format!("line {}: empty key", idx + 1)));
        }
        entries.push(KvEntry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line: idx + 1,
        });
    }
    Ok(entries)
}

pub fn parse_file(path: &Path) -> Result<Vec<KvEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CfbtError::io(path, e))?;
    parse_str(&text).map_err(|e| match e {
        CfbtError::Config(msg) => CfbtError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses a `key=value` override as passed on the command line.
pub fn parse_override(text: &str) -> Result<KvEntry> {
    let Some((key, value)) = text.split_once('=') else {
        return Err(CfbtError::Config(format!(
            "override `{text}` is not of the form key=value"
        )));
    };
    Ok(KvEntry {
        key: key.trim().to_string(),
        value: value.trim().to_string(),
        line: 0,
    })
}

/// Applies all entries to a single config, rejecting unknown keys.
pub fn apply_all<C: KvConfig>(config: &mut C, entries: &[KvEntry]) -> Result<()> {
    for e in entries {
        if !config.apply(&e.key, &e.value)? {
            return Err(unknown_key(e));
        }
    }
    Ok(())
}

pub fn unknown_key(e: &KvEntry) -> CfbtError {
    if e.line > 0 {
        CfbtError::Config(format!("line {}: unknown key `{}`", e.line, e.key))
    } else {
        CfbtError::Config(format!("unknown key `{}`", e.key))
    }
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse::<T>()
        .map_err(|e| CfbtError::Config(format!("`{key}`: cannot parse `{raw}`: {e}")))
}

pub fn boolean(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CfbtError::Config(format!(
            "`{key}`: expected a boolean, got `{raw}`"
        ))),
    }
}

pub fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if raw.is_empty() || raw == "none" {
        return Ok(Vec::new());
    }
    raw.split(',').map(|item| value(key, item.trim())).collect()
}

pub fn format_list<T: Display>(items: &[T]) -> String {
    if items.is_empty() {
        return "none".to_string();
    }
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let entries = parse_str("# header\n\nembed_dim = 96  # width\ncstf_layers=4,7,10\n").unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].key, "embed_dim");
        assert_eq!(entries[0].value, "96");
        assert_eq!(entries[0].line, 3);
        assert_eq!(entries[1].value, "4,7,10");
    }

    #[test]
    fn rejects_line_without_equals() {
        assert!(parse_str("embed_dim 96").is_err());
    }

    #[test]
    fn lists_round_trip() {
        let xs: Vec<usize> = list("k", "4, 7,10").unwrap();
        assert_eq!(xs, vec![4, 7, 10]);
        assert_eq!(format_list(&xs), "4,7,10");
        let empty: Vec<usize> = list("k", "none").unwrap();
        assert!(empty.is_empty());
        assert_eq!(format_list::<usize>(&[]), "none");
    }

    #[test]
    fn override_parsing() {
        let e = parse_override("lambda1=3.5").unwrap();
        assert_eq!((e.key.as_str(), e.value.as_str()), ("lambda1", "3.5"));
        assert!(parse_override("lambda1").is_err());
    }
}
