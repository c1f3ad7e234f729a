use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::jobs::{self, EventSource, JobEvent};
use crate::model::{validate_transition, JobId, JobRecord, JobState, SiteId, Timestamp};
use crate::store::{Store, StoreError, Table};

pub const MAX_NOTE_CHARS: usize = 1024;

#[derive(Debug, Error)]
pub enum MonError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A progress report from an agent or a worker node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusMessage {
    pub job_id: JobId,
    pub reported_state: JobState,
    pub step_index: Option<u32>,
    pub note: String,
    pub site_id: SiteId,
    pub timestamp: Timestamp,
    /// Normalized CPU seconds consumed, sent with the end-of-execution report.
    pub cpu_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReportOutcome {
    /// The job moved to the reported state.
    Applied,
    /// Same state as current; stored as progress.
    Progress,
    /// Seen before; nothing stored.
    Duplicate,
    /// Stored with the illegal-transition flag; state unchanged.
    Illegal,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub running: u64,
    pub done: u64,
    pub failed: u64,
    pub cpu_share: f64,
}

pub struct MonitoringService {
    store: Arc<Store>,
}

/// States only the production service may set.
fn service_owned(s: JobState) -> bool {
    matches!(s, JobState::Created | JobState::Waiting | JobState::Assigned)
}

impl MonitoringService {
    pub fn new(store: Arc<Store>) -> Self {
        MonitoringService { store }
    }

    pub fn report_status(&self, m: &StatusMessage) -> Result<ReportOutcome, MonError> {
        if m.note.chars().count() > MAX_NOTE_CHARS {
            return Err(MonError::InvalidMessage(format!("note longer than {MAX_NOTE_CHARS} characters")));
        }
        if let Some(c) = m.cpu_seconds {
            if !c.is_finite() || c < 0.0 {
                return Err(MonError::InvalidMessage(format!("cpu_seconds {c}")));
            }
        }
        self.store.transact(|txn| {
            let mut rec: JobRecord =
                jobs::load(txn, &m.job_id)?.ok_or_else(|| MonError::UnknownJob(m.job_id.clone()))?;
            let dedup = format!(
                "{}/{}/{}/{}/{}",
                m.job_id,
                rec.attempt,
                m.reported_state,
                m.timestamp.millis(),
                m.step_index.map(|s| s.to_string()).unwrap_or_default()
            );
            if txn.contains(Table::StatusDedup, &dedup) {
                return Ok(ReportOutcome::Duplicate);
            }
            txn.put(Table::StatusDedup, &dedup, Vec::new());

            let out_of_order = rec.last_report.is_some_and(|t| m.timestamp < t);
            rec.last_report = Some(rec.last_report.map_or(m.timestamp, |t| t.max(m.timestamp)));
            let outcome = if m.reported_state == rec.state {
                ReportOutcome::Progress
            } else if service_owned(m.reported_state) || !validate_transition(rec.state, m.reported_state) {
                ReportOutcome::Illegal
            } else {
                rec.transition(m.reported_state, m.timestamp, m.note.clone())
                    .expect("transition validated above");
                ReportOutcome::Applied
            };
            if outcome != ReportOutcome::Illegal {
                if let Some(c) = m.cpu_seconds {
                    rec.cpu_seconds = Some(c);
                }
            }
            let ev = JobEvent {
                timestamp: m.timestamp,
                state: m.reported_state,
                attempt: rec.attempt,
                site_id: Some(m.site_id.clone()),
                step_index: m.step_index,
                note: m.note.clone(),
                cpu_seconds: m.cpu_seconds,
                source: EventSource::Agent,
                illegal_transition: outcome == ReportOutcome::Illegal,
                out_of_order,
            };
            jobs::append_event(txn, &m.job_id, &ev)?;
            jobs::save(txn, &rec)?;
            Ok(outcome)
        })
    }

    pub fn job_history(&self, job_id: &JobId) -> Result<Vec<JobEvent>, MonError> {
        self.store.transact(|txn| {
            if !txn.contains(Table::Jobs, job_id.as_str()) {
                return Err(MonError::UnknownJob(job_id.clone()));
            }
            Ok(jobs::events(txn, job_id)?)
        })
    }

    /// Per-site counts and the share of normalized CPU used by Done jobs.
    pub fn site_summary(&self) -> Result<BTreeMap<SiteId, SiteSummary>, MonError> {
        self.store.transact(|txn| {
            let mut out: BTreeMap<SiteId, SiteSummary> = BTreeMap::new();
            let mut cpu: BTreeMap<SiteId, f64> = BTreeMap::new();
            for (_, rec) in txn.scan_json::<JobRecord>(Table::Jobs, "")? {
                // A failed job has its site cleared when rescheduled; such
                // jobs count as Waiting again and belong to no site.
                let Some(site) = rec.site.clone() else { continue };
                let s = out.entry(site.clone()).or_default();
                match rec.state {
                    JobState::Done => {
                        s.done += 1;
                        *cpu.entry(site).or_default() += rec.cpu_seconds.unwrap_or(0.0);
                    }
                    JobState::Failed => s.failed += 1,
                    st if st.is_active() => s.running += 1,
                    _ => {}
                }
            }
            let total: f64 = cpu.values().sum();
            if total > 0.0 {
                for (site, c) in cpu {
                    if let Some(s) = out.get_mut(&site) {
                        s.cpu_share = c / total;
                    }
                }
            }
            Ok(out)
        })
    }
}
