//! Flag/config-file merging and the effective-config echo.
//!
//! A config file is a flat JSON object. Keys are `<command>.<flag>` (for
//! example `train.epochs`), or bare `seed` / `out`, which apply to every
//! command. Command-line flags win over the file, the file wins over
//! built-in defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

const SHARED_KEYS: [&str; 2] = ["seed", "out"];

pub const EFFECTIVE_CONFIG: &str = "effective-config.json";

pub struct Settings {
    command: &'static str,
    file: BTreeMap<String, Value>,
    effective: BTreeMap<String, Value>,
    queried: BTreeSet<String>,
}

impl Settings {
    pub fn load(command: &'static str, path: Option<&Path>) -> Result<Self, Failure> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Failure::runtime(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str::<BTreeMap<String, Value>>(&text).map_err(|e| {
                    Failure::Usage(format!(
                        "{}: config must be a flat JSON object: {e}",
                        p.display()
                    ))
                })?
            }
        };
        let prefix = format!("{command}.");
        for key in file.keys() {
            let known_elsewhere = key.contains('.') && !key.starts_with(&prefix);
            if !known_elsewhere && !key.starts_with(&prefix) && !SHARED_KEYS.contains(&key.as_str())
            {
                return Err(Failure::Usage(format!(
                    "config key '{key}' must be '{command}.{key}' or one of {SHARED_KEYS:?}"
                )));
            }
        }
        Ok(Self {
            command,
            file,
            effective: BTreeMap::new(),
            queried: BTreeSet::new(),
        })
    }

    fn qualified(&self, key: &str) -> String {
        format!("{}.{key}", self.command)
    }

    fn file_value<T: DeserializeOwned>(&mut self, key: &str) -> Result<Option<T>, Failure> {
        let qualified = self.qualified(key);
        self.queried.insert(qualified.clone());
        let (name, value) = match self.file.get(&qualified) {
            Some(v) => (qualified, v),
            None => match self.file.get(key).filter(|_| SHARED_KEYS.contains(&key)) {
                Some(v) => (key.to_string(), v),
                None => return Ok(None),
            },
        };
        serde_json::from_value(value.clone())
            .map(Some)
            .map_err(|e| Failure::Usage(format!("config key '{name}': {e}")))
    }

    /// Whether `key` was given on the command line or in the file.
    pub fn provided(&self, key: &str, flag_present: bool) -> bool {
        flag_present
            || self.file.contains_key(&self.qualified(key))
            || (SHARED_KEYS.contains(&key) && self.file.contains_key(key))
    }

    pub fn optional<T: Serialize + DeserializeOwned>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, Failure> {
        let in_file = self.file_value(key)?;
        let value = flag.or(in_file);
        if let Some(v) = &value {
            self.record(key, v);
        }
        Ok(value)
    }

    pub fn resolve<T: Serialize + DeserializeOwned>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, Failure> {
        let value = self.optional(key, flag)?.unwrap_or(default);
        self.record(key, &value);
        Ok(value)
    }

    pub fn required<T: Serialize + DeserializeOwned>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<T, Failure> {
        self.optional(key, flag)?.ok_or_else(|| {
            Failure::Usage(format!(
                "missing --{key} (flag or '{}' in the config file)",
                self.qualified(key)
            ))
        })
    }

    /// Overrides the echoed value, e.g. with a setting read from a checkpoint.
    pub fn record<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).expect("setting serializes");
        self.effective.insert(self.qualified(key), v);
    }

    /// Rejects `<command>.*` file keys that name no setting of the command.
    pub fn check_unused(&self) -> Result<(), Failure> {
        let prefix = format!("{}.", self.command);
        match self
            .file
            .keys()
            .find(|k| k.starts_with(&prefix) && !self.queried.contains(*k))
        {
            Some(k) => Err(Failure::Usage(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }

    /// Writes `effective-config.json`; feeding it back through `--config`
    /// repeats the invocation.
    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let json = serde_json::to_string_pretty(&self.effective).expect("settings serialize");
        fs::create_dir_all(dir)
            .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, json + "\n")
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
    }
}
