use std::fmt;

use super::outbox::EntryKind;
use super::Outcome;
use crate::model::{JobId, JobState, SoftwareRef, Timestamp};
use crate::swrepo::InstallOutcome;

/// How an outbound message left the agent.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Delivery {
    Direct,
    /// Cached in the outbox for a later cycle.
    Spooled,
    /// The service answered with a fault; the message is not retried.
    Fault(i32),
    /// Could neither send nor spool.
    Lost,
}

impl fmt::Display for Delivery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delivery::Direct => f.write_str("direct"),
            Delivery::Spooled => f.write_str("spooled"),
            Delivery::Fault(c) => write!(f, "fault:{c}"),
            Delivery::Lost => f.write_str("lost"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Reported { job: JobId, state: JobState, delivery: Delivery },
    Relayed { job: JobId, state: JobState, delivery: Delivery },
    Pulled { job: JobId },
    NoWork,
    PullGated { occupancy: f64, local_jobs: u32 },
    PullSkipped { reason: String },
    Software { job: JobId, software: SoftwareRef, outcome: InstallOutcome },
    SoftwareUnavailable { job: JobId, reason: String },
    Submitted { job: JobId, batch_id: String },
    SubmitFailed { job: JobId, reason: String },
    RescheduleRequested { job: JobId, reason: String, delivery: Delivery },
    Completed { job: JobId, outcome: Outcome, outputs: usize },
    Registered { lfn: String, delivery: Delivery },
    Enqueued { kind: EntryKind, lfn: String },
    TransferVerified { lfn: String, url: String, attempt: u32 },
    TransferFailed { lfn: String, attempt: u32, reason: String },
    LogDelivered { lfn: String },
    ReplicaAdded { lfn: String, storage_element: String },
    ReplicaDeferred { lfn: String, reason: String },
    ReplicaRejected { lfn: String, code: i32 },
    MetadataDelivered { destination: String, method: String },
    MetadataDropped { destination: String, method: String, code: i32 },
    MetadataDeferred { destination: String, method: String },
    JobDone { job: JobId },
    Error { context: String, message: String },
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Reported { .. } => "report",
            Action::Relayed { .. } => "relay",
            Action::Pulled { .. } => "pull",
            Action::NoWork => "no_work",
            Action::PullGated { .. } => "pull_gated",
            Action::PullSkipped { .. } => "pull_skipped",
            Action::Software { .. } => "software",
            Action::SoftwareUnavailable { .. } => "software_unavailable",
            Action::Submitted { .. } => "submit",
            Action::SubmitFailed { .. } => "submit_failed",
            Action::RescheduleRequested { .. } => "reschedule",
            Action::Completed { .. } => "completed",
            Action::Registered { .. } => "register",
            Action::Enqueued { .. } => "enqueue",
            Action::TransferVerified { .. } => "transfer_verified",
            Action::TransferFailed { .. } => "transfer_failed",
            Action::LogDelivered { .. } => "log_delivered",
            Action::ReplicaAdded { .. } => "replica_added",
            Action::ReplicaDeferred { .. } => "replica_deferred",
            Action::ReplicaRejected { .. } => "replica_rejected",
            Action::MetadataDelivered { .. } => "metadata_delivered",
            Action::MetadataDropped { .. } => "metadata_dropped",
            Action::MetadataDeferred { .. } => "metadata_deferred",
            Action::JobDone { .. } => "job_done",
            Action::Error { .. } => "error",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            Action::Reported { job, state, delivery } | Action::Relayed { job, state, delivery } => {
                format!("job={job} state={} via={delivery}", state.as_str())
            }
            Action::Pulled { job } | Action::JobDone { job } => format!("job={job}"),
            Action::NoWork => String::new(),
            Action::PullGated { occupancy, local_jobs } => format!("occupancy={occupancy:.3} local={local_jobs}"),
            Action::PullSkipped { reason } => reason.clone(),
            Action::Software { job, software, outcome } => {
                let o = match outcome {
                    InstallOutcome::Installed => "installed",
                    InstallOutcome::Cached => "cached",
                };
                format!("job={job} sw={software} {o}")
            }
            Action::SoftwareUnavailable { job, reason } | Action::SubmitFailed { job, reason } => {
                format!("job={job} reason={reason}")
            }
            Action::Submitted { job, batch_id } => format!("job={job} batch={batch_id}"),
            Action::RescheduleRequested { job, reason, delivery } => {
                format!("job={job} reason={reason} via={delivery}")
            }
            Action::Completed { job, outcome, outputs } => {
                format!("job={job} outcome={} outputs={outputs}", outcome.as_str())
            }
            Action::Registered { lfn, delivery } => format!("lfn={lfn} via={delivery}"),
            Action::Enqueued { kind, lfn } => format!("{} lfn={lfn}", kind.as_str()),
            Action::TransferVerified { lfn, url, attempt } => format!("lfn={lfn} url={url} attempt={attempt}"),
            Action::TransferFailed { lfn, attempt, reason } => format!("lfn={lfn} attempt={attempt} reason={reason}"),
            Action::LogDelivered { lfn } => format!("lfn={lfn}"),
            Action::ReplicaAdded { lfn, storage_element } => format!("lfn={lfn} se={storage_element}"),
            Action::ReplicaDeferred { lfn, reason } => format!("lfn={lfn} reason={reason}"),
            Action::ReplicaRejected { lfn, code } => format!("lfn={lfn} code={code}"),
            Action::MetadataDelivered { destination, method } | Action::MetadataDeferred { destination, method } => {
                format!("to={destination} method={method}")
            }
            Action::MetadataDropped { destination, method, code } => {
                format!("to={destination} method={method} code={code}")
            }
            Action::Error { context, message } => format!("{context}: {message}"),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.detail();
        if d.is_empty() {
            f.write_str(self.kind())
        } else {
            write!(f, "{} {d}", self.kind())
        }
    }
}

/// Everything one agent cycle did, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleReport {
    pub at: Timestamp,
    pub actions: Vec<Action>,
}

impl CycleReport {
    pub fn new(at: Timestamp) -> Self {
        CycleReport { at, actions: Vec::new() }
    }

    pub fn push(&mut self, a: Action) {
        self.actions.push(a);
    }

    pub fn count(&self, kind: &str) -> usize {
        self.actions.iter().filter(|a| a.kind() == kind).count()
    }

    pub fn pulled(&self) -> Vec<&JobId> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::Pulled { job } => Some(job),
                _ => None,
            })
            .collect()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Action> {
        self.actions.iter().filter(|a| matches!(a, Action::Error { .. }))
    }
}
