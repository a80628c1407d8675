//! Service settings read from a TOML file and the environment.
//!
//! ```toml
//! addr = "127.0.0.1:8080"
//! bundle_root = "bundles"
//!
//! [defaults.train]
//! epochs = 30
//! ```

use std::path::{Path, PathBuf};

use fairloop_core::fairness_loop::LoopConfig;
use serde::Deserialize;
use thiserror::Error;

pub const CONFIG_ENV: &str = "FAIRLOOP_CONFIG";
pub const ADDR_ENV: &str = "FAIRLOOP_ADDR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub addr: String,
    /// Directory under which sessions are persisted and loaded by name.
    pub bundle_root: PathBuf,
    pub max_upload_bytes: usize,
    /// Engine settings that request bodies override field by field.
    pub defaults: LoopConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            addr: "127.0.0.1:8080".into(),
            bundle_root: PathBuf::from("bundles"),
            max_upload_bytes: 256 << 20,
            defaults: LoopConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads the file named by `path`, else by `FAIRLOOP_CONFIG`, else the
    /// defaults; `FAIRLOOP_ADDR` then overrides the bind address.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut config = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::load(&p)?,
            None => Self::default(),
        };
        if let Ok(addr) = std::env::var(ADDR_ENV) {
            config.addr = addr;
        }
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = ServiceConfig::from_toml("bundle_root = \"/tmp/b\"\n[defaults.train]\nepochs = 3\n").unwrap();
        assert_eq!(c.bundle_root, PathBuf::from("/tmp/b"));
        assert_eq!(c.defaults.train.epochs, 3);
        assert_eq!(c.defaults.train.batch_size, 32);
        assert_eq!(c.addr, ServiceConfig::default().addr);
    }

    #[test]
    fn unknown_types_are_rejected() {
        assert!(ServiceConfig::from_toml("max_upload_bytes = \"big\"").is_err());
    }
}
