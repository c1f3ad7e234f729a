//! Deterministic discrete-event simulation of production sites, and a
//! harness that runs agents against them and the central services.

mod clock;
mod harness;
mod portal;
mod scenario;
mod site;

use thiserror::Error;

use crate::model::SiteId;

pub use clock::SimClock;
pub use harness::{Accounting, SimNode, Simulation, SimulationOptions};
pub use portal::{MessagePath, PortalSite};
pub use scenario::{parse_scenario, AgentDefaults, RunSpec, Scenario, SiteSpec};
pub use site::{synthetic_checksum, BatchJobState, BatchStatus, Delivered, SimEvent, SimSite};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario line {line}: {reason}")]
    Scenario { line: usize, reason: String },
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("invalid site configuration: {0}")]
    InvalidConfig(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Injected failures. All draws come from one generator seeded with
/// `rng_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct FailurePolicy {
    /// Per job: the application fails.
    pub app_failure_prob: f64,
    /// Per job: the site loses the job (batch system, disk quota).
    pub site_failure_prob: f64,
    /// Per job: the output is lost before it leaves the site.
    pub transfer_loss_prob: f64,
    /// Per transfer attempt, transient.
    pub transfer_failure_prob: f64,
    pub submission_failure_prob: f64,
    /// Optional hazard rate: a job running `h` hours additionally fails with
    /// probability `1 - exp(-rate * h)`. Zero disables it.
    pub site_failure_per_hour: f64,
    pub rng_seed: u64,
}

impl FailurePolicy {
    pub fn none(rng_seed: u64) -> Self {
        FailurePolicy {
            app_failure_prob: 0.0,
            site_failure_prob: 0.0,
            transfer_loss_prob: 0.0,
            transfer_failure_prob: 0.0,
            submission_failure_prob: 0.0,
            site_failure_per_hour: 0.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [
            ("app", self.app_failure_prob),
            ("site", self.site_failure_prob),
            ("transfer_loss", self.transfer_loss_prob),
            ("transfer", self.transfer_failure_prob),
            ("submit", self.submission_failure_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if self.app_failure_prob + self.site_failure_prob + self.transfer_loss_prob > 1.0 + 1e-12 {
            return Err(SimError::InvalidConfig("per-job failure probabilities sum above 1".into()));
        }
        if self.site_failure_per_hour.is_nan() || self.site_failure_per_hour < 0.0 {
            return Err(SimError::InvalidConfig("negative hazard rate".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteConfig {
    pub site_id: SiteId,
    pub slot_count: u32,
    /// Runtime scales as nominal runtime / cpu_power.
    pub cpu_power: f64,
    pub disk_quota_mb: u64,
    pub shared_area_writable: bool,
    pub wn_outbound_connectivity: bool,
    pub failure_policy: FailurePolicy,
}

impl SiteConfig {
    pub fn new(site_id: impl Into<SiteId>, slot_count: u32, cpu_power: f64) -> Self {
        SiteConfig {
            site_id: site_id.into(),
            slot_count,
            cpu_power,
            disk_quota_mb: 1 << 20,
            shared_area_writable: true,
            wn_outbound_connectivity: true,
            failure_policy: FailurePolicy::none(0),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.slot_count < 1 {
            return Err(SimError::InvalidConfig(format!("{}: slot_count must be at least 1", self.site_id)));
        }
        if self.cpu_power.is_nan() || self.cpu_power <= 0.0 {
            return Err(SimError::InvalidConfig(format!("{}: cpu_power must be positive", self.site_id)));
        }
        self.failure_policy.validate()
    }
}

/// Synthetic workload model shared by all sites.
#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    /// CPU time per event per step at cpu_power 1.
    pub cpu_ms_per_event: u64,
    pub bytes_per_event: u64,
    pub log_bytes: u64,
    pub bandwidth_bytes_per_s: f64,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            cpu_ms_per_event: 60_000,
            bytes_per_event: 200_000,
            log_bytes: 50_000,
            bandwidth_bytes_per_s: 10_000_000.0,
        }
    }
}
