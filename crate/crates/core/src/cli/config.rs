use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::CliError;

/// Flat settings from a config file and `--set` overrides, plus what each
/// command actually resolved.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub paths: BTreeMap<String, String>,
    pub settings: BTreeMap<String, String>,
    #[serde(skip)]
    provided: BTreeMap<String, String>,
    #[serde(skip)]
    used: BTreeSet<String>,
}

/// Parses either a JSON object or `key = value` lines (`#` starts a comment).
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let trimmed = text.trim_start();
    let mut out = BTreeMap::new();
    if trimmed.starts_with('{') {
        let v: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(trimmed).map_err(|e| CliError::Usage(format!("config JSON: {e}")))?;
        for (k, v) in v {
            let s = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Null => continue,
                other => other.to_string(),
            };
            out.insert(normalize(&k), s);
        }
        return Ok(out);
    }
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_pair(line).ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        out.insert(k, v);
    }
    Ok(out)
}

fn split_pair(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((normalize(k), v.trim().trim_matches('"').to_string()))
}

fn normalize(k: &str) -> String {
    k.trim().replace('-', "_")
}

impl RunConfig {
    pub fn new(command: &str, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut provided = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config_text(&text)?
            }
            None => BTreeMap::new(),
        };
        for o in overrides {
            let (k, v) = split_pair(o).ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
            provided.insert(k, v);
        }
        Ok(RunConfig {
            command: command.to_string(),
            provided,
            ..RunConfig::default()
        })
    }

    /// Resolves `key`: an explicit flag wins, then config/`--set`, then `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + ToString,
    {
        self.used.insert(key.to_string());
        let v = match (flag, self.provided.get(key)) {
            (Some(v), _) => v,
            (None, Some(raw)) => raw
                .parse()
                .map_err(|_| CliError::Usage(format!("setting {key}: cannot parse {raw:?}")))?,
            (None, None) => default,
        };
        self.settings.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        let s = self.get("seed", flag, 0)?;
        self.seed = s;
        Ok(s)
    }

    pub fn path(&mut self, role: &str, p: &Path) {
        self.paths.insert(role.to_string(), p.display().to_string());
    }

    /// Rejects settings no part of the command consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<_> = self.provided.keys().filter(|k| !self.used.contains(*k)).cloned().collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "unknown setting(s) for {}: {}",
                self.command,
                unknown.join(", ")
            )))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn write_into(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let p = dir.join("run_config.json");
        std::fs::write(&p, self.to_json())?;
        Ok(p)
    }

    /// For commands whose output is a single file: `<file>.config.json`.
    pub fn write_beside(&self, file: &Path) -> Result<PathBuf, CliError> {
        let mut name = file.as_os_str().to_owned();
        name.push(".config.json");
        let p = PathBuf::from(name);
        std::fs::write(&p, self.to_json())?;
        Ok(p)
    }
}
