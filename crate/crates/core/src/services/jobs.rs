//! Job records and their event history, shared by production and monitoring.

use serde::{Deserialize, Serialize};

use crate::model::{IllegalTransition, JobId, JobRecord, JobState, SiteId, Timestamp};
use crate::store::{StoreError, Table, Txn};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventSource {
    Service,
    Agent,
}

impl EventSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EventSource::Service => "service",
            EventSource::Agent => "agent",
        }
    }
}

/// One entry of a job's history: a service-side transition or a stored
/// agent report, with the flags monitoring attached to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub timestamp: Timestamp,
    pub state: JobState,
    pub attempt: u32,
    pub site_id: Option<SiteId>,
    pub step_index: Option<u32>,
    pub note: String,
    pub cpu_seconds: Option<f64>,
    pub source: EventSource,
    pub illegal_transition: bool,
    pub out_of_order: bool,
}

impl JobEvent {
    pub(crate) fn service(rec: &JobRecord, at: Timestamp, note: impl Into<String>) -> Self {
        JobEvent {
            timestamp: at,
            state: rec.state,
            attempt: rec.attempt,
            site_id: rec.site.clone(),
            step_index: None,
            note: note.into(),
            cpu_seconds: None,
            source: EventSource::Service,
            illegal_transition: false,
            out_of_order: false,
        }
    }
}

pub(crate) fn load(txn: &Txn<'_>, id: &JobId) -> Result<Option<JobRecord>, StoreError> {
    txn.get_json(Table::Jobs, id.as_str())
}

pub(crate) fn save(txn: &mut Txn<'_>, rec: &JobRecord) -> Result<(), StoreError> {
    txn.put_json(Table::Jobs, rec.job_id.as_str(), rec)
}

fn history_prefix(id: &JobId) -> String {
    format!("{}/", id.as_str())
}

pub(crate) fn append_event(txn: &mut Txn<'_>, id: &JobId, ev: &JobEvent) -> Result<(), StoreError> {
    let prefix = history_prefix(id);
    let seq = txn.scan(Table::JobHistory, &prefix).count();
    txn.put_json(Table::JobHistory, &format!("{prefix}{seq:08}"), ev)
}

pub(crate) fn events(txn: &Txn<'_>, id: &JobId) -> Result<Vec<JobEvent>, StoreError> {
    Ok(txn
        .scan_json::<JobEvent>(Table::JobHistory, &history_prefix(id))?
        .into_iter()
        .map(|(_, e)| e)
        .collect())
}

/// Applies a service-owned transition and records it in the history.
pub(crate) fn service_transition<E>(
    txn: &mut Txn<'_>,
    rec: &mut JobRecord,
    to: JobState,
    at: Timestamp,
    note: &str,
) -> Result<(), E>
where
    E: From<StoreError> + From<IllegalTransition>,
{
    rec.transition(to, at, note)?;
    let ev = JobEvent::service(rec, rec.last_update, note);
    append_event(txn, &rec.job_id, &ev)?;
    Ok(())
}
