//! Flat key=value configuration files.
//!
//! Every long flag has a config-file counterpart under the same name without
//! the leading dashes (`alpha = 0.05`, `fixed = x1,x2`). Values given on the
//! command line win over the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// Parsed key=value file. Lines are `key = value`; blank lines and lines
/// starting with `#` are ignored.
#[derive(Debug, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
    origin: Option<PathBuf>,
}

impl ConfigMap {
    /// A map with no entries, used when no `--config` file was given.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Read and parse `path`. Duplicate keys are rejected so a typo cannot
    /// silently lose a setting.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "{} line {}: expected `key = value`, got {raw:?}",
                    path.display(),
                    idx + 1
                );
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                bail!("{} line {}: empty key", path.display(), idx + 1);
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                bail!("{} line {}: duplicate key {key:?}", path.display(), idx + 1);
            }
        }
        Ok(Self {
            entries,
            origin: Some(path.to_path_buf()),
        })
    }

    /// Raw string value.
    pub fn string(&self, key: &str) -> Option<String> {
        self.entries.get(key).cloned()
    }

    /// Value parsed to `T`, with the file and key named on failure.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => match raw.parse() {
                Ok(v) => Ok(Some(v)),
                Err(e) => bail!("{}: key {key:?} has invalid value {raw:?}: {e}", self.name()),
            },
        }
    }

    /// Comma-separated list value, trimmed, empty items removed.
    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.entries.get(key).map(|raw| {
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
    }

    /// Comma-separated list of numbers.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.list(key) {
            None => Ok(None),
            Some(items) => items
                .iter()
                .map(|s| {
                    s.parse().map_err(|e| {
                        anyhow::anyhow!("{}: key {key:?} has invalid number {s:?}: {e}", self.name())
                    })
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    /// Path value.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.entries.get(key).map(PathBuf::from)
    }

    /// Warn about keys the current subcommand does not understand.
    pub fn warn_unknown(&self, allowed: &[&str]) {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                log::warn!("{}: ignoring unknown key {key:?}", self.name());
            }
        }
    }

    fn name(&self) -> String {
        self.origin
            .as_ref()
            .map_or_else(|| "config".to_string(), |p| p.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(body: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().expect("temp file");
        file.write_all(body.as_bytes()).expect("write config");
        file
    }

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let file = write_config("# study setup\n\nalpha = 0.05\nfixed = x1, x2\nseed=7\n");
        let cfg = ConfigMap::load(file.path()).expect("config should parse");
        assert_eq!(
            cfg.parse::<f64>("alpha").unwrap(),
            Some(0.05),
            "alpha should parse as a float"
        );
        assert_eq!(
            cfg.list("fixed"),
            Some(vec!["x1".to_string(), "x2".to_string()]),
            "lists should split on commas and trim"
        );
        assert_eq!(cfg.parse::<u64>("seed").unwrap(), Some(7), "seed should parse");
        assert_eq!(cfg.string("missing"), None, "absent keys are None");
    }

    #[test]
    fn rejects_duplicate_keys_and_bad_lines() {
        let file = write_config("alpha = 0.05\nalpha = 0.10\n");
        let err = ConfigMap::load(file.path()).expect_err("duplicate keys should fail");
        assert!(
            err.to_string().contains("duplicate key"),
            "error should name the duplicate, got: {err}"
        );

        let file = write_config("just a bare line\n");
        let err = ConfigMap::load(file.path()).expect_err("lines need key=value");
        assert!(
            err.to_string().contains("expected `key = value`"),
            "error should show the malformed line, got: {err}"
        );
    }

    #[test]
    fn invalid_numbers_name_the_key() {
        let file = write_config("t = 0.5, oops\n");
        let cfg = ConfigMap::load(file.path()).expect("file itself is well-formed");
        let err = cfg.f64_list("t").expect_err("non-numeric list entry should fail");
        assert!(
            err.to_string().contains("\"t\""),
            "error should name the key, got: {err}"
        );
    }
}
