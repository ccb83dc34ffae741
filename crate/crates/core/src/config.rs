//! `key = value` configuration files. `#` starts a comment; blank lines are
//! ignored; keys are unique.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::ConfigParse { line: i + 1, msg: format!("expected key = value, got {line:?}") });
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::ConfigParse { line: i + 1, msg: format!("duplicate key {key:?}") });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::ConfigParse { line: *line, msg: format!("bad value {v:?} for {key}") }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::InvalidConfig(format!("missing key {key:?}")))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Rejects keys outside `known`.
    pub fn only(&self, known: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::ConfigParse { line: *line, msg: format!("unknown key {k:?}") });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let kv = KeyValues::parse("# header\na = 1.5  # trailing\n\nb=v2\n").unwrap();
        assert_eq!(kv.get::<f64>("a").unwrap(), Some(1.5));
        assert_eq!(kv.raw("b"), Some("v2"));
        assert_eq!(kv.get::<f64>("c").unwrap(), None);
    }

    #[test]
    fn rejects_malformed() {
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse("a=1\na=2\n").is_err());
        let kv = KeyValues::parse("a = x").unwrap();
        assert!(kv.get::<f64>("a").is_err());
        assert!(kv.only(&["b"]).is_err());
    }
}
