use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::client::Endpoints;
use crate::model::SiteId;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("missing key {0}")]
    Missing(&'static str),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: String, reason: String },
}

/// Site-local agent settings, read from `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub site_id: SiteId,
    pub endpoints: Option<Endpoints>,
    /// Desired number of this agent's jobs queued or running locally.
    pub fill_target: u32,
    pub occupancy_threshold: f64,
    pub poll_interval_ms: u64,
    /// Directory for the lock file, persisted state and job-local areas.
    pub work_dir: PathBuf,
    pub outbox_path: PathBuf,
    pub install_area: PathBuf,
    pub install_quota_bytes: Option<u64>,
    pub storage_element: String,
    pub max_transfer_attempts_per_cycle: u32,
    /// Forward worker-node messages that cannot reach monitoring directly.
    pub relay_enabled: bool,
    /// Send every dataset registration twice (delivery-semantics testing).
    pub duplicate_registrations: bool,
    /// Ask for rescheduling after application or site failures at runtime.
    pub reschedule_runtime_failures: bool,
    /// Pull jobs from production; off for agents that only run adopted jobs.
    pub pull_enabled: bool,
}

impl AgentConfig {
    pub fn new(site_id: impl Into<SiteId>, work_dir: impl Into<PathBuf>) -> Self {
        let work_dir = work_dir.into();
        AgentConfig {
            site_id: site_id.into(),
            endpoints: None,
            fill_target: 10,
            occupancy_threshold: 0.8,
            poll_interval_ms: 600_000,
            outbox_path: work_dir.join("outbox"),
            install_area: work_dir.join("software"),
            install_quota_bytes: None,
            storage_element: "CERN-Castor".into(),
            max_transfer_attempts_per_cycle: 50,
            relay_enabled: true,
            duplicate_registrations: false,
            reschedule_runtime_failures: false,
            pull_enabled: true,
            work_dir,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: &str| ConfigError::Invalid {
            key: key.into(),
            reason: reason.into(),
        };
        if self.site_id.as_str().is_empty() {
            return Err(ConfigError::Missing("site_id"));
        }
        if self.fill_target < 1 {
            return Err(invalid("fill_target", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.occupancy_threshold) {
            return Err(invalid("occupancy_threshold", "must be within [0, 1]"));
        }
        if self.max_transfer_attempts_per_cycle < 1 {
            return Err(invalid("max_transfer_attempts_per_cycle", "must be at least 1"));
        }
        if self.poll_interval_ms == 0 {
            return Err(invalid("poll_interval", "must be positive"));
        }
        Ok(())
    }

    /// Parses the config file format. `#` starts a comment. Paths default
    /// to subdirectories of `work_dir`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| kv.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let site = get("site_id").ok_or(ConfigError::Missing("site_id"))?;
        let work = get("work_dir").ok_or(ConfigError::Missing("work_dir"))?;
        let mut c = AgentConfig::new(site, work);
        for (k, v) in &kv {
            match k.as_str() {
                "site_id" | "work_dir" => {}
                "fill_target" => c.fill_target = num(k, v)?,
                "occupancy_threshold" => c.occupancy_threshold = num(k, v)?,
                "poll_interval" => c.poll_interval_ms = duration_ms(k, v)?,
                "outbox_path" => c.outbox_path = PathBuf::from(v),
                "install_area" => c.install_area = PathBuf::from(v),
                "install_quota_mb" => c.install_quota_bytes = Some(num::<u64>(k, v)? << 20),
                "storage_element" => c.storage_element = v.clone(),
                "max_transfer_attempts_per_cycle" => c.max_transfer_attempts_per_cycle = num(k, v)?,
                "relay_enabled" => c.relay_enabled = boolean(k, v)?,
                "duplicate_registrations" => c.duplicate_registrations = boolean(k, v)?,
                "reschedule_runtime_failures" => c.reschedule_runtime_failures = boolean(k, v)?,
                "services" => c.endpoints = Some(Endpoints::single(v)),
                "production_url" => endpoints(&mut c).production = v.clone(),
                "monitoring_url" => endpoints(&mut c).monitoring = v.clone(),
                "bookkeeping_url" => endpoints(&mut c).bookkeeping = v.clone(),
                "software_url" => endpoints(&mut c).software = v.clone(),
                other => {
                    return Err(ConfigError::Invalid {
                        key: other.to_string(),
                        reason: "unknown key".into(),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn endpoints(c: &mut AgentConfig) -> &mut Endpoints {
    c.endpoints.get_or_insert_with(|| Endpoints::single("http://127.0.0.1:4040"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Invalid {
        key: key.into(),
        reason: format!("{v:?} is not a number"),
    })
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Invalid {
            key: key.into(),
            reason: format!("{v:?} is not a boolean"),
        }),
    }
}

/// `30`, `30s`, `500ms`, `10m` or `2h`.
pub fn duration_ms(key: &str, v: &str) -> Result<u64, ConfigError> {
    let (digits, unit) = match v.find(|c: char| !c.is_ascii_digit() && c != '.') {
        Some(i) => v.split_at(i),
        None => (v, "s"),
    };
    let n: f64 = num(key, digits)?;
    let scale = match unit {
        "ms" => 1.0,
        "s" => 1000.0,
        "m" => 60_000.0,
        "h" => 3_600_000.0,
        _ => {
            return Err(ConfigError::Invalid {
                key: key.into(),
                reason: format!("unknown unit {unit:?}"),
            })
        }
    };
    Ok((n * scale).round() as u64)
}
