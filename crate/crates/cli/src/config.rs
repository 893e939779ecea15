//! Flat `key = value` configuration with command-line overrides.
//!
//! Precedence: command-line flag, then config file, then built-in default.
//! Blank lines and `#` comments are ignored. Keys use underscores; the
//! matching flags use dashes (`esg_samples` ↔ `--esg-samples`).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub struct Settings {
    values: BTreeMap<String, String>,
}

/// `(key, default)`; an empty default means "unset unless given".
pub type KeySpec = (&'static str, &'static str);

pub const COMMON_KEYS: &[KeySpec] = &[("seed", "0"), ("out", ""), ("workers", "1")];

impl Settings {
    pub fn resolve(
        config: Option<&Path>,
        keys: &[KeySpec],
        overrides: Vec<(&'static str, Option<String>)>,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            COMMON_KEYS.iter().chain(keys).map(|(k, d)| (k.to_string(), d.to_string())).collect();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_config(&text, &path.display().to_string())? {
                if !values.contains_key(&k) {
                    return Err(CliError::Usage(format!("{}: unknown key `{k}`", path.display())));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in overrides {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| CliError::Usage(format!("invalid value {raw:?} for `{key}`: {e}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Usage(format!("invalid entry {s:?} in `{key}`: {e}"))))
            .collect()
    }

    pub fn optional(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|s| !s.is_empty())
    }

    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        self.optional(key).ok_or_else(|| CliError::Usage(format!("missing required setting `{key}` (--{})", key.replace('_', "-"))))
    }

    /// Resolved settings, one `key = value` line each, sorted by key.
    pub fn manifest(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_config(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{origin}:{}: expected `key = value`, found {line:?}", i + 1)));
        };
        let k = k.trim();
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(CliError::Usage(format!("{origin}:{}: invalid key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_lines() {
        let kv = parse_config("# c\nseed = 3\n\n width=8 # trailing\n", "f").unwrap();
        assert_eq!(kv, vec![("seed".into(), "3".into()), ("width".into(), "8".into())]);
        let err = parse_config("seed = 1\nnonsense\n", "f.txt").unwrap_err();
        assert!(err.to_string().contains("f.txt:2"), "{err}");
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "seed = 3\nwidth = 8\n").unwrap();
        let s = Settings::resolve(Some(&p), &[("width", "32")], vec![("seed", Some("9".into()))]).unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), 9);
        assert_eq!(s.get::<usize>("width").unwrap(), 8);
        assert!(s.manifest().contains("width = 8\n"));
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(Settings::resolve(Some(&p), &[], vec![]).is_err());
    }
}
