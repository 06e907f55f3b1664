//! `KEY=VALUE` configuration merged from a file, `PQTT_` environment
//! variables and command-line flags (later sources win).

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::broker::DEFAULT_PORT;
use crate::devices::{DEFAULT_HEARTBEAT_SECS, DEFAULT_LOG_PATH, DEFAULT_MOTION_TOPIC};

pub const ENV_PREFIX: &str = "PQTT_";

pub const KEYS: [&str; 9] = [
    "BROKER_HOST",
    "BROKER_PORT",
    "CERT_DIR",
    "CLIENT_ID",
    "SCHEME",
    "HEARTBEAT_SECS",
    "MOTION_TOPIC",
    "VERIFY_AT_BROKER",
    "LOG_PATH",
];

pub const DEFAULT_CERT_DIR: &str = "./pqc-mqtt/certs";

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown configuration key {key} ({source_name})")]
    UnknownKey { key: String, source_name: String },
    #[error("{source_name} line {line}: expected KEY=VALUE")]
    Syntax { source_name: String, line: usize },
    #[error("invalid value for {key}: {value:?} ({reason})")]
    Value {
        key: &'static str,
        value: String,
        reason: String,
    },
}

fn known(key: &str) -> bool {
    KEYS.contains(&key)
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

/// Parses `KEY=VALUE` lines. Blank lines and `#` comments are skipped; a
/// leading `export ` is accepted so shell env files work unchanged.
pub fn parse_config_file(text: &str, source_name: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line = line.strip_prefix("export ").unwrap_or(line).trim_start();
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                source_name: source_name.to_owned(),
                line: i + 1,
            });
        };
        let k = k.trim();
        let k = k.strip_prefix(ENV_PREFIX).unwrap_or(k);
        if !known(k) {
            return Err(ConfigError::UnknownKey {
                key: k.to_owned(),
                source_name: source_name.to_owned(),
            });
        }
        out.insert(k.to_owned(), unquote(v).to_owned());
    }
    Ok(out)
}

/// Picks `PQTT_*` variables; any other `PQTT_` name is an error.
pub fn from_env<I>(vars: I) -> Result<BTreeMap<String, String>, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut out = BTreeMap::new();
    for (name, value) in vars {
        let Some(k) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        if !known(k) {
            return Err(ConfigError::UnknownKey {
                key: name.clone(),
                source_name: "environment".into(),
            });
        }
        out.insert(k.to_owned(), value);
    }
    Ok(out)
}

/// The merged view; typed accessors fall back to defaults.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CliConfig {
    values: BTreeMap<String, String>,
}

impl CliConfig {
    pub fn merge(
        file: BTreeMap<String, String>,
        env: BTreeMap<String, String>,
        flags: BTreeMap<String, String>,
    ) -> Result<CliConfig, ConfigError> {
        let mut values = BTreeMap::new();
        for layer in [file, env, flags] {
            for (k, v) in layer {
                if !known(&k) {
                    return Err(ConfigError::UnknownKey {
                        key: k,
                        source_name: "flags".into(),
                    });
                }
                values.insert(k, v);
            }
        }
        let cfg = CliConfig { values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.broker_port()?;
        self.heartbeat_secs()?;
        self.verify_at_broker()?;
        for key in ["CLIENT_ID", "MOTION_TOPIC", "BROKER_HOST", "CERT_DIR", "LOG_PATH", "SCHEME"] {
            if self.get(key).is_some_and(str::is_empty) {
                return Err(ConfigError::Value {
                    key: KEYS.iter().find(|k| **k == key).copied().unwrap_or("?"),
                    value: String::new(),
                    reason: "must not be empty".into(),
                });
            }
        }
        Ok(())
    }

    pub fn broker_host(&self) -> String {
        self.get("BROKER_HOST").unwrap_or("localhost").to_owned()
    }

    pub fn broker_port(&self) -> Result<u16, ConfigError> {
        let Some(v) = self.get("BROKER_PORT") else {
            return Ok(DEFAULT_PORT);
        };
        match v.trim().parse::<u16>() {
            Ok(p) if p >= 1 => Ok(p),
            _ => Err(ConfigError::Value {
                key: "BROKER_PORT",
                value: v.to_owned(),
                reason: "expected 1..65535".into(),
            }),
        }
    }

    pub fn cert_dir(&self) -> PathBuf {
        PathBuf::from(self.get("CERT_DIR").unwrap_or(DEFAULT_CERT_DIR))
    }

    pub fn client_id(&self) -> Option<String> {
        self.get("CLIENT_ID").map(str::to_owned)
    }

    pub fn scheme(&self) -> String {
        self.get("SCHEME").unwrap_or("falcon-1024").to_owned()
    }

    pub fn heartbeat_secs(&self) -> Result<f64, ConfigError> {
        let Some(v) = self.get("HEARTBEAT_SECS") else {
            return Ok(DEFAULT_HEARTBEAT_SECS as f64);
        };
        match v.trim().parse::<f64>() {
            Ok(s) if s.is_finite() && s > 0.0 => Ok(s),
            _ => Err(ConfigError::Value {
                key: "HEARTBEAT_SECS",
                value: v.to_owned(),
                reason: "expected a positive number of seconds".into(),
            }),
        }
    }

    pub fn motion_topic(&self) -> String {
        self.get("MOTION_TOPIC").unwrap_or(DEFAULT_MOTION_TOPIC).to_owned()
    }

    pub fn verify_at_broker(&self) -> Result<bool, ConfigError> {
        let Some(v) = self.get("VERIFY_AT_BROKER") else {
            return Ok(true);
        };
        match v.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => Ok(true),
            "0" | "false" | "no" | "off" => Ok(false),
            _ => Err(ConfigError::Value {
                key: "VERIFY_AT_BROKER",
                value: v.to_owned(),
                reason: "expected true or false".into(),
            }),
        }
    }

    pub fn log_path(&self) -> PathBuf {
        PathBuf::from(self.get("LOG_PATH").unwrap_or(DEFAULT_LOG_PATH))
    }
}
