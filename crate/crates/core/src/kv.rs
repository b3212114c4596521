//! Plain-text key=value files: one pair per line, `#` comments, blank lines
//! ignored. Used for corpus provenance, schedule sidecars and experiment
//! configs. Keys are written sorted so serialized files are deterministic.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn new() -> Self {
        KvFile::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::invalid(format!(
                    "line {}: expected key=value, got {:?}",
                    lineno + 1,
                    raw
                )));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::invalid(format!(
                    "line {}: duplicate key {:?}",
                    lineno + 1,
                    key
                )));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        KvFile::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Typed reader that tracks consumed keys so callers can reject unknown ones.
pub struct KvReader<'a> {
    kv: &'a KvFile,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl<'a> KvReader<'a> {
    pub fn new(kv: &'a KvFile) -> Self {
        KvReader {
            kv,
            consumed: Default::default(),
        }
    }

    fn mark(&self, key: &str) {
        self.consumed.borrow_mut().insert(key.to_string());
    }

    pub fn opt_str(&self, key: &str) -> Option<String> {
        self.mark(key);
        self.kv.get(key).map(|s| s.to_string())
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.opt_str(key).unwrap_or_else(|| default.to_string())
    }

    pub fn require_str(&self, key: &str) -> Result<String> {
        self.opt_str(key)
            .ok_or_else(|| Error::invalid(format!("missing required key {key:?}")))
    }

    pub fn parse_as<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::invalid(format!("key {key:?}: cannot parse {raw:?}")))
    }

    pub fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.opt_str(key) {
            None => Ok(None),
            Some(raw) => Ok(Some(self.parse_as(key, &raw)?)),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require_str(key)?;
        self.parse_as(key, &raw)
    }

    /// Error out if the file holds keys nothing consumed — typoed or unknown
    /// settings must not be ignored silently.
    pub fn finish(self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&str> = self
            .kv
            .keys()
            .filter(|k| !consumed.contains(**&k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_with_comments() {
        let kv = KvFile::parse("# comment\na=1\n\n b = two \n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two"));
        let again = KvFile::parse(&kv.to_text()).unwrap();
        assert_eq!(kv, again);
    }

    #[test]
    fn duplicate_and_malformed_rejected() {
        assert!(KvFile::parse("a=1\na=2").is_err());
        assert!(KvFile::parse("just a line").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let kv = KvFile::parse("known=1\nmystery=2").unwrap();
        let r = KvReader::new(&kv);
        let _: u32 = r.require("known").unwrap();
        let err = r.finish().unwrap_err().to_string();
        assert!(err.contains("mystery"), "{err}");
    }
}
