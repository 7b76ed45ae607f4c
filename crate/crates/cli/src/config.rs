//! Layered run configuration: flags over `--config` file over defaults.
//!
//! A config file is a JSON object. Keys may sit at the top level or under a
//! section named after the subcommand (`{"train": {"epochs": 5}}`); a
//! section wins over the top level.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const SEED_ENV: &str = "NUQUANT_SEED";

#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(root)) => Ok(Self { root }),
            Ok(_) => Err(CliError::Usage(format!(
                "config {} must be a JSON object",
                path.display()
            ))),
            Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
        }
    }

    /// Keys that apply to `subcommand`.
    fn section(&self, subcommand: &str) -> Map<String, Value> {
        let mut out: Map<String, Value> = self
            .root
            .iter()
            .filter(|(_, v)| !v.is_object())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if let Some(Value::Object(sec)) = self.root.get(subcommand) {
            out.extend(sec.clone());
        }
        out
    }

    /// `defaults` overlaid with the file. A `seed` field not set by the file
    /// falls back to `NUQUANT_SEED` when that is set.
    pub fn resolve<T: Serialize + DeserializeOwned>(
        &self,
        subcommand: &str,
        defaults: T,
    ) -> Result<T, CliError> {
        let mut value = serde_json::to_value(defaults).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        let section = self.section(subcommand);
        if obj.contains_key("seed") && !section.contains_key("seed") {
            if let Some(seed) = env_seed()? {
                obj.insert("seed".into(), seed.into());
            }
        }
        obj.extend(section);
        serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("config for {subcommand}: {e}")))
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("{SEED_ENV}={s:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

/// Overwrites `target` when a flag was given.
pub fn set<T>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}
