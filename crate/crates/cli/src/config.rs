//! Plain-text `key=value` config files and the `config_used` echo.
//!
//! Precedence: explicit flag > config file > built-in default. Every command
//! writes its fully resolved configuration to `<out>/config_used` in the
//! same format, so a run can be reproduced with `--config <out>/config_used`.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct FileConfig {
    entries: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config {} line {}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { entries })
    }

    /// Typed lookup; unparseable values are usage errors.
    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                CliError::Usage(format!("config key {key}: cannot parse value {raw:?}"))
            }),
        }
    }

    pub fn get_string(&self, key: &str) -> Option<String> {
        self.entries.get(key).cloned()
    }

    /// Flag wins, then file value, then default.
    pub fn resolve<T: FromStr + Clone>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> CliResult<T> {
        Ok(flag.or(self.get(key)?).unwrap_or(default))
    }

    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
        Ok(flag.or(self.get(key)?))
    }

    /// Boolean switches: a bare flag can only turn the value on; the file can
    /// set either state.
    pub fn resolve_switch(&self, flag: bool, key: &str) -> CliResult<bool> {
        if flag {
            return Ok(true);
        }
        self.get::<bool>(key).map(|v| v.unwrap_or(false))
    }
}

/// Ordered key=value echo written as `config_used`.
#[derive(Debug, Default)]
pub struct ConfigEcho {
    lines: Vec<(String, String)>,
}

impl ConfigEcho {
    pub fn new(command: &str) -> Self {
        let mut echo = ConfigEcho::default();
        echo.push("command", command);
        echo
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn push_opt(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.push(key, v);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        fs::write(out_dir.join("config_used"), self.to_text())
            .map_err(|e| CliError::Io(format!("cannot write config_used: {e}")))
    }
}

/// Parse `lo:hi` ranges (`300:600`).
pub fn parse_range<T: FromStr + PartialOrd + Copy>(text: &str, what: &str) -> CliResult<(T, T)> {
    let err = || CliError::Usage(format!("{what}: expected LO:HI, got {text:?}"));
    let (lo, hi) = text.split_once(':').ok_or_else(err)?;
    let lo = lo.trim().parse::<T>().map_err(|_| err())?;
    let hi = hi.trim().parse::<T>().map_err(|_| err())?;
    Ok((lo, hi))
}

/// Parse comma-separated lists (`1,4,16`).
pub fn parse_list<T: FromStr>(text: &str, what: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("{what}: cannot parse entry {part:?}")))
        })
        .collect()
}

pub fn join_list<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn ensure_out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Io(format!("cannot create output dir {}: {e}", path.display())))
}
