//! `prism.json`: server configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::access::QuotaPolicy;

/// Environment variable naming the configuration file.
pub const CONFIG_ENV: &str = "PRISM_CONFIG";
pub const DEFAULT_CONFIG_FILE: &str = "prism.json";

#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_pool_size() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub bind_address: String,
    pub models_dir: PathBuf,
    pub keys_path: PathBuf,
    pub jobs_path: PathBuf,
    pub outbox_path: PathBuf,
    pub log_path: PathBuf,
    pub anonymous_quota: QuotaPolicy,
    /// Maximum live workers, shared by sync calls and job drainers.
    pub pool_size: usize,
    /// Seconds a finished job's result is kept.
    pub retention: u64,
    pub queue_cap: usize,
    /// Extra directories searched for bare plugin command names.
    pub plugin_dirs: Vec<PathBuf>,
    /// Seconds between expiry sweeps.
    pub expiry_interval: u64,
    /// Run the default-input handshake against every model at startup.
    pub validate_plugins: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            bind_address: default_bind(),
            models_dir: "models".into(),
            keys_path: "keys.json".into(),
            jobs_path: "jobs.jsonl".into(),
            outbox_path: "outbox.jsonl".into(),
            log_path: "requests.jsonl".into(),
            anonymous_quota: QuotaPolicy::default(),
            pool_size: default_pool_size(),
            retention: 24 * 3600,
            queue_cap: 1000,
            plugin_dirs: Vec::new(),
            expiry_interval: 60,
            validate_plugins: true,
        }
    }
}

impl GatewayConfig {
    /// State files under `data_dir`, models from `models_dir`.
    pub fn with_dirs(data_dir: &Path, models_dir: &Path) -> Self {
        Self {
            models_dir: models_dir.to_path_buf(),
            keys_path: data_dir.join("keys.json"),
            jobs_path: data_dir.join("jobs.jsonl"),
            outbox_path: data_dir.join("outbox.jsonl"),
            log_path: data_dir.join("requests.jsonl"),
            ..Self::default()
        }
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            ConfigError(format!("{}: `{}`: {}", path.display(), e.path(), e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.models_dir,
            &mut cfg.keys_path,
            &mut cfg.jobs_path,
            &mut cfg.outbox_path,
            &mut cfg.log_path,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for d in &mut cfg.plugin_dirs {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(cfg)
    }

    /// `--config` if given, else `$PRISM_CONFIG`, else `./prism.json` when
    /// present, else defaults.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        if let Some(p) = std::env::var_os(CONFIG_ENV) {
            return Self::load(Path::new(&p));
        }
        let local = Path::new(DEFAULT_CONFIG_FILE);
        if local.exists() {
            return Self::load(local);
        }
        Ok(Self::default())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pool_size == 0 {
            return Err(ConfigError("pool_size must be at least 1".into()));
        }
        if self.queue_cap == 0 {
            return Err(ConfigError("queue_cap must be at least 1".into()));
        }
        if self.expiry_interval == 0 {
            return Err(ConfigError("expiry_interval must be at least 1".into()));
        }
        self.anonymous_quota
            .validate()
            .map_err(|m| ConfigError(format!("anonymous_quota: {m}")))?;
        let files = [
            ("keys_path", &self.keys_path),
            ("jobs_path", &self.jobs_path),
            ("outbox_path", &self.outbox_path),
            ("log_path", &self.log_path),
        ];
        let mut seen = HashSet::new();
        for (name, p) in files {
            if !seen.insert(p) {
                return Err(ConfigError(format!("{name} {} is used twice", p.display())));
            }
        }
        if !self.models_dir.is_dir() {
            return Err(ConfigError(format!(
                "models_dir {} is not a directory",
                self.models_dir.display()
            )));
        }
        Ok(())
    }
}
