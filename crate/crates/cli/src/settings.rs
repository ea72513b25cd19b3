//! Flag / config-file / default resolution and run manifests.
//!
//! A config file holds `key=value` lines whose keys are the long flag names.
//! Flags win over the file, the file wins over defaults. Every resolved value
//! is recorded so the manifest written next to a run's outputs can be fed
//! back through `--config` to reproduce it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Display};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

const META_KEYS: [&str; 2] = ["command", "version"];

pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: Vec<(String, String)>,
}

impl Settings {
    pub fn load(path: Option<&str>, command: &str) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("{path}: {e}")))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::usage(format!("{path}:{}: expected key=value", i + 1))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
            if let Some(other) = file.get("command").filter(|c| *c != command) {
                return Err(CliError::usage(format!(
                    "{path} was written by `{other}`, not `{command}`"
                )));
            }
        }
        Ok(Settings {
            file,
            used: BTreeSet::new(),
            resolved: Vec::new(),
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::usage(format!("invalid value `{raw}` for `{key}` in config"))),
        }
    }

    fn record<T: Display>(&mut self, key: &str, value: &T) {
        self.resolved.push((key.to_string(), value.to_string()));
    }

    pub fn value<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        let file = self.file_value(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        let file = self.file_value(key)?;
        let v = flag.or(file);
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<T, CliError> {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::usage(format!("missing required option --{key}")))
    }

    /// Boolean switch: set by the flag, or by `key=true` in the config file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let file: Option<bool> = self.file_value(key)?;
        let v = flag || file.unwrap_or(false);
        self.record(key, &v);
        Ok(v)
    }

    /// Rejects config keys that no option consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&String> = self
            .file
            .keys()
            .filter(|k| !self.used.contains(*k) && !META_KEYS.contains(&k.as_str()))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::usage(format!("unknown config keys: {unknown:?}")))
        }
    }

    pub fn manifest(&self, command: &str) -> String {
        let mut out = format!("command={command}\nversion={}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write_manifest(&self, command: &str, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.manifest(command))
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }
}

/// Comma-separated list value such as `128,64`.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad list item `{p}`")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
