//! The site agent: pulls work when the local batch queue has room, installs
//! software on demand, submits, and ships outputs through a durable outbox.

pub mod config;
pub mod outbox;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fs2::FileExt;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{register_call, report_call, reschedule_call, CentralClient, ClientError, Transport, TransportError};
use crate::model::{
    DatasetDescription, DatasetStatus, JobDescriptor, JobId, JobState, Replica, ResourceCapability, RunId, Timestamp,
};
use crate::protocol::{decode_call, encode_call, RpcCall, RpcReply};
use crate::services::{faults, reasons, ServiceKind, StatusMessage};
use crate::swrepo::{InstallArea, BOOTSTRAP_NAME};

pub use config::{AgentConfig, ConfigError};
pub use outbox::{EntryKind, NewEntry, Outbox, OutboxEntry, OutboxError, Stage};
pub use report::{Action, CycleReport, Delivery};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent work area {0} is locked by another agent")]
    Locked(PathBuf),
    #[error("this agent is not configured as a relay")]
    RelayDisabled,
    #[error("corrupt agent state: {0}")]
    CorruptState(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Outbox(#[from] OutboxError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// This agent's jobs in the local batch system.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchLoad {
    pub queued: u32,
    pub running: u32,
}

impl BatchLoad {
    pub fn total(self) -> u32 {
        self.queued + self.running
    }
}

/// Fraction of the batch capacity held by this agent's jobs, clamped to [0, 1].
pub fn compute_occupancy(load: BatchLoad, slot_count: u32) -> f64 {
    if slot_count == 0 {
        return 1.0;
    }
    (load.total() as f64 / slot_count as f64).clamp(0.0, 1.0)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    AppFailure,
    SiteFailure,
    /// Ran, but the output was lost before it could leave the site.
    TransferLoss,
    /// Handed to a nested agent, which finalizes it itself.
    Delegated,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::AppFailure => "app_failure",
            Outcome::SiteFailure => "site_failure",
            Outcome::TransferLoss => "transfer_loss",
            Outcome::Delegated => "delegated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProducedFile {
    pub local_path: String,
    pub lfn: String,
    pub data_type: String,
    pub step: u32,
    pub size_bytes: u64,
    pub checksum: u32,
    pub events: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub batch_id: String,
    pub job_id: JobId,
    pub outcome: Outcome,
    pub outputs: Vec<ProducedFile>,
    pub logs: Vec<ProducedFile>,
    pub cpu_seconds: f64,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{0}")]
pub struct SubmitError(pub String);

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{0}")]
pub struct TransferError(pub String);

/// Confirmation from the destination storage element.
#[derive(Clone, Debug, PartialEq)]
pub struct Receipt {
    pub url: String,
    pub checksum: u32,
}

/// What is handed to the batch system.
#[derive(Clone, Debug)]
pub struct JobWrapper {
    pub descriptor: JobDescriptor,
    pub software_root: Option<PathBuf>,
    pub script: String,
}

/// The site as seen by its agent: batch system, local disk and the WAN.
pub trait LocalSite {
    fn now(&self) -> Timestamp;
    fn slot_count(&self) -> u32;
    fn cpu_power(&self) -> f64;
    fn free_disk_mb(&self) -> u64;
    fn shared_area_writable(&self) -> bool;
    /// Software is installed where the job lands rather than by this agent.
    fn installs_remotely(&self) -> bool {
        false
    }
    fn batch_load(&self) -> BatchLoad;
    fn submit(&mut self, wrapper: JobWrapper) -> Result<String, SubmitError>;
    fn take_completed(&mut self) -> Vec<Completion>;
    fn transfer(&mut self, local_path: &str, storage_element: &str, lfn: &str) -> Result<Receipt, TransferError>;
    /// The local copy is no longer needed.
    fn release(&mut self, local_path: &str);
}

/// Shell wrapper submitted to the batch system: sets up each step's
/// software, announces the step and runs it.
pub fn wrapper_script(job: &JobDescriptor, software_root: Option<&Path>) -> String {
    let root = software_root.map_or_else(|| "$PULLGRID_SW".to_string(), |p| p.display().to_string());
    let mut s = format!(
        "#!/bin/sh\n# job {} run {} events {} offset {}\nset -e\nSW={root}\n",
        job.job_id, job.run_id, job.events, job.first_event_offset
    );
    for (i, step) in job.resolved_steps.iter().enumerate() {
        s.push_str(&format!(
            "pullgrid_status {} Running step={i}\n. \"$SW/{app}/{ver}/{BOOTSTRAP_NAME}\"\n\"$SW/{app}/{ver}/run/{app}\" {}",
            job.job_id,
            job.events,
            app = step.application,
            ver = step.app_version,
        ));
        for (k, v) in &step.options {
            s.push_str(&format!(" {k}={v}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Phase {
    Submitted,
    /// Waiting for these datasets to be transferred and registered.
    Finalizing { pending: BTreeSet<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LocalJob {
    run_id: RunId,
    batch_id: String,
    phase: Phase,
    cpu_seconds: Option<f64>,
    job_local_area: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct State {
    jobs: BTreeMap<JobId, LocalJob>,
}

const STATE_FILE: &str = "state.json";
const LOCK_FILE: &str = "agent.lock";
/// Running is confirmed at completion in case no worker-node message got through.
const BATCH_FINISHED: &str = "batch job finished";

pub struct Agent {
    config: AgentConfig,
    client: CentralClient,
    outbox: Outbox,
    shared_area: Option<InstallArea>,
    state: State,
    dirty: bool,
    _lock: File,
}

impl Agent {
    pub fn open(config: AgentConfig, transport: Arc<dyn Transport>) -> Result<Self, AgentError> {
        config.validate()?;
        fs::create_dir_all(&config.work_dir)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(config.work_dir.join(LOCK_FILE))?;
        lock.try_lock_exclusive()
            .map_err(|_| AgentError::Locked(config.work_dir.clone()))?;
        let state = match fs::read(config.work_dir.join(STATE_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| AgentError::CorruptState(e.to_string()))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => State::default(),
            Err(e) => return Err(e.into()),
        };
        let outbox = Outbox::open(&config.outbox_path)?;
        Ok(Agent {
            config,
            client: CentralClient::new(transport),
            outbox,
            shared_area: None,
            state,
            dirty: false,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    pub fn client(&self) -> &CentralClient {
        &self.client
    }

    /// Jobs submitted or finalizing.
    pub fn local_jobs(&self) -> usize {
        self.state.jobs.len()
    }

    pub fn has_job(&self, job: &JobId) -> bool {
        self.state.jobs.contains_key(job)
    }

    pub fn is_idle(&self) -> bool {
        self.state.jobs.is_empty() && self.outbox.is_empty()
    }

    /// One invocation: flush the outbox, finalize completed jobs, then pull
    /// new work while the local queue has room.
    pub fn run_cycle(&mut self, site: &mut dyn LocalSite) -> CycleReport {
        let mut r = CycleReport::new(site.now());
        let mut flush = Flush {
            budget: self.config.max_transfer_attempts_per_cycle,
            attempted: BTreeSet::new(),
        };
        self.flush_outbox(site, &mut flush, &mut r);
        self.finalize(site, &mut r);
        self.flush_outbox(site, &mut flush, &mut r);
        self.complete_finished(site, &mut r);
        if self.config.pull_enabled {
            self.pull(site, &mut r);
        }
        self.save(&mut r);
        r
    }

    /// Forwards a worker-node status message, spooling it if monitoring is
    /// unreachable. The original timestamp is kept.
    pub fn relay(&mut self, msg: &StatusMessage, now: Timestamp) -> Result<Action, AgentError> {
        if !self.config.relay_enabled {
            return Err(AgentError::RelayDisabled);
        }
        let delivery = self.send_or_spool(ServiceKind::Monitoring, &report_call(msg), Some(&msg.job_id), now);
        Ok(Action::Relayed {
            job: msg.job_id.clone(),
            state: msg.reported_state,
            delivery,
        })
    }

    /// Runs a job assigned elsewhere (a portal-shipped job on a worker node):
    /// installs its software and submits it without announcing either step.
    pub fn adopt(&mut self, site: &mut dyn LocalSite, job: JobDescriptor) -> CycleReport {
        let mut r = CycleReport::new(site.now());
        self.start_job(site, job, false, &mut r);
        self.save(&mut r);
        r
    }

    fn save(&mut self, r: &mut CycleReport) {
        if !self.dirty {
            return;
        }
        let path = self.config.work_dir.join(STATE_FILE);
        let tmp = self.config.work_dir.join("state.json.tmp");
        let result = fs::write(&tmp, serde_json::to_vec(&self.state).expect("state serializes"))
            .and_then(|_| fs::rename(&tmp, &path));
        match result {
            Ok(()) => self.dirty = false,
            Err(e) => r.push(error("save state", e)),
        }
    }

    fn send_or_spool(&mut self, kind: ServiceKind, call: &RpcCall, job: Option<&JobId>, now: Timestamp) -> Delivery {
        if !self.has_spooled(kind) {
            match self.client.call_raw(kind, call) {
                Ok(_) => return Delivery::Direct,
                Err(ClientError::Fault { code, .. }) if code != faults::INTERNAL => return Delivery::Fault(code),
                Err(_) => {}
            }
        }
        let Ok(data) = encode_call(call) else {
            return Delivery::Lost;
        };
        let entry = NewEntry {
            kind: EntryKind::Metadata,
            local_path: String::new(),
            destination: kind.name().to_string(),
            lfn: None,
            job_id: job.cloned(),
            checksum: None,
            size_bytes: data.len() as u64,
            created_at: now,
        };
        match self.outbox.push(entry, &data) {
            Ok(_) => Delivery::Spooled,
            Err(_) => Delivery::Lost,
        }
    }

    fn has_spooled(&self, kind: ServiceKind) -> bool {
        self.outbox
            .entries()
            .any(|e| e.kind == EntryKind::Metadata && e.destination == kind.name())
    }

    fn report(&mut self, site: &dyn LocalSite, job: &JobId, state: JobState, note: &str, r: &mut CycleReport) {
        let cpu_seconds = match state {
            JobState::Transferring | JobState::Done => self.state.jobs.get(job).and_then(|j| j.cpu_seconds),
            _ => None,
        };
        let msg = StatusMessage {
            job_id: job.clone(),
            reported_state: state,
            step_index: None,
            note: note.to_string(),
            site_id: self.config.site_id.clone(),
            timestamp: site.now(),
            cpu_seconds,
        };
        let delivery = self.send_or_spool(ServiceKind::Monitoring, &report_call(&msg), Some(job), site.now());
        r.push(Action::Reported {
            job: job.clone(),
            state,
            delivery,
        });
    }

    fn request_reschedule(&mut self, site: &dyn LocalSite, job: &JobId, reason: &str, r: &mut CycleReport) {
        let call = reschedule_call(job, reason, Some(&self.config.site_id));
        let delivery = self.send_or_spool(ServiceKind::Production, &call, Some(job), site.now());
        r.push(Action::RescheduleRequested {
            job: job.clone(),
            reason: reason.to_string(),
            delivery,
        });
    }

    fn forget(&mut self, job: &JobId) {
        if let Some(j) = self.state.jobs.remove(job) {
            if j.job_local_area {
                let _ = fs::remove_dir_all(self.job_dir(job));
            }
        }
        self.dirty = true;
    }

    fn job_dir(&self, job: &JobId) -> PathBuf {
        self.config.work_dir.join("jobs").join(job.as_str())
    }

    fn flush_outbox(&mut self, site: &mut dyn LocalSite, flush: &mut Flush, r: &mut CycleReport) {
        let mut blocked: BTreeSet<String> = BTreeSet::new();
        for seq in self.outbox.seqs() {
            if flush.attempted.contains(&seq) {
                continue;
            }
            let Some(entry) = self.outbox.get(seq).cloned() else {
                continue;
            };
            if entry.kind == EntryKind::Metadata && blocked.contains(&entry.destination) {
                continue;
            }
            if flush.budget == 0 {
                break;
            }
            flush.budget -= 1;
            flush.attempted.insert(seq);
            let result = match entry.kind {
                EntryKind::Metadata => self.flush_metadata(entry, &mut blocked, r),
                EntryKind::Dataset | EntryKind::Log => self.flush_file(site, entry, &mut blocked, r),
            };
            if let Err(e) = result {
                r.push(error("outbox", e));
            }
        }
    }

    fn flush_metadata(
        &mut self,
        mut entry: OutboxEntry,
        blocked: &mut BTreeSet<String>,
        r: &mut CycleReport,
    ) -> Result<(), OutboxError> {
        let destination = entry.destination.clone();
        let kind = ServiceKind::from_path(&format!("/{destination}"));
        let call = self.outbox.data(entry.seq).ok().and_then(|d| decode_call(&d).ok());
        let (Some(kind), Some(call)) = (kind, call) else {
            self.outbox.remove(entry.seq)?;
            r.push(Action::Error {
                context: "outbox".into(),
                message: format!("undeliverable metadata entry {}", entry.seq),
            });
            return Ok(());
        };
        let method = call.method.clone();
        match self.client.call_raw(kind, &call) {
            Ok(_) => {
                self.outbox.remove(entry.seq)?;
                r.push(Action::MetadataDelivered { destination, method });
            }
            Err(ClientError::Fault { code, .. }) if code != faults::INTERNAL => {
                self.outbox.remove(entry.seq)?;
                r.push(Action::MetadataDropped {
                    destination,
                    method,
                    code,
                });
            }
            Err(_) => {
                entry.attempts += 1;
                self.outbox.update(&entry)?;
                blocked.insert(destination.clone());
                r.push(Action::MetadataDeferred { destination, method });
            }
        }
        Ok(())
    }

    fn flush_file(
        &mut self,
        site: &mut dyn LocalSite,
        mut entry: OutboxEntry,
        blocked: &mut BTreeSet<String>,
        r: &mut CycleReport,
    ) -> Result<(), OutboxError> {
        let lfn = entry.lfn.clone().unwrap_or_default();
        if entry.stage == Stage::Pending {
            entry.attempts += 1;
            let verified = match site.transfer(&entry.local_path, &entry.destination, &lfn) {
                Ok(receipt) if Some(receipt.checksum) == entry.checksum => Ok(receipt.url),
                Ok(receipt) => Err(format!("checksum mismatch {:08x}", receipt.checksum)),
                Err(e) => Err(e.0),
            };
            match verified {
                Ok(url) => {
                    r.push(Action::TransferVerified {
                        lfn: lfn.clone(),
                        url: url.clone(),
                        attempt: entry.attempts,
                    });
                    if entry.kind == EntryKind::Log {
                        self.outbox.remove(entry.seq)?;
                        r.push(Action::LogDelivered { lfn });
                        return Ok(());
                    }
                    entry.stage = Stage::Transferred { url };
                    self.outbox.update(&entry)?;
                }
                Err(reason) => {
                    self.outbox.update(&entry)?;
                    r.push(Action::TransferFailed {
                        lfn,
                        attempt: entry.attempts,
                        reason,
                    });
                    return Ok(());
                }
            }
        }
        let Stage::Transferred { url } = entry.stage.clone() else {
            return Ok(());
        };
        let book = ServiceKind::Bookkeeping.name();
        let registration_queued = self
            .outbox
            .entries()
            .any(|e| e.seq < entry.seq && e.kind == EntryKind::Metadata && e.destination == book);
        if blocked.contains(book) || registration_queued {
            r.push(Action::ReplicaDeferred {
                lfn,
                reason: "bookkeeping backlog".into(),
            });
            return Ok(());
        }
        let replica = Replica {
            lfn: lfn.clone(),
            storage_element: entry.destination.clone(),
            url,
            registered_at: site.now(),
            checksum: entry.checksum.unwrap_or_default(),
        };
        match self.client.add_replica(&replica) {
            Ok(()) => {
                self.outbox.remove(entry.seq)?;
                site.release(&entry.local_path);
                r.push(Action::ReplicaAdded {
                    lfn: lfn.clone(),
                    storage_element: entry.destination.clone(),
                });
                self.mark_delivered(entry.job_id.as_ref(), &lfn);
            }
            Err(ClientError::Fault { code, .. }) if code != faults::UNKNOWN_LFN && code != faults::INTERNAL => {
                self.outbox.remove(entry.seq)?;
                site.release(&entry.local_path);
                r.push(Action::ReplicaRejected { lfn: lfn.clone(), code });
                self.mark_delivered(entry.job_id.as_ref(), &lfn);
            }
            Err(e) => {
                if !matches!(e, ClientError::Fault { .. }) {
                    blocked.insert(book.to_string());
                }
                r.push(Action::ReplicaDeferred {
                    lfn,
                    reason: e.to_string(),
                });
            }
        }
        Ok(())
    }

    fn mark_delivered(&mut self, job: Option<&JobId>, lfn: &str) {
        let Some(j) = job.and_then(|id| self.state.jobs.get_mut(id)) else {
            return;
        };
        if let Phase::Finalizing { pending } = &mut j.phase {
            if pending.remove(lfn) {
                self.dirty = true;
            }
        }
    }

    fn finalize(&mut self, site: &mut dyn LocalSite, r: &mut CycleReport) {
        for c in site.take_completed() {
            let Some(job) = self.state.jobs.get_mut(&c.job_id) else {
                r.push(Action::Error {
                    context: "finalize".into(),
                    message: format!("completion for unknown job {} (batch {})", c.job_id, c.batch_id),
                });
                continue;
            };
            job.cpu_seconds = Some(c.cpu_seconds);
            let run_id = job.run_id.clone();
            self.dirty = true;
            r.push(Action::Completed {
                job: c.job_id.clone(),
                outcome: c.outcome,
                outputs: c.outputs.len(),
            });
            match c.outcome {
                Outcome::Delegated => self.forget(&c.job_id),
                Outcome::AppFailure | Outcome::SiteFailure => {
                    let reason = match c.outcome {
                        Outcome::AppFailure => reasons::APP_FAILURE,
                        _ => reasons::SITE_FAILURE,
                    };
                    self.report(site, &c.job_id, JobState::Failed, reason, r);
                    if self.config.reschedule_runtime_failures {
                        self.request_reschedule(site, &c.job_id, reason, r);
                    }
                    self.forget(&c.job_id);
                }
                Outcome::TransferLoss => {
                    self.report(site, &c.job_id, JobState::Running, BATCH_FINISHED, r);
                    self.report(site, &c.job_id, JobState::Transferring, "", r);
                    let note = format!("{}: output lost before transfer", reasons::TRANSFER_FAILURE);
                    self.report(site, &c.job_id, JobState::Failed, &note, r);
                    for f in c.outputs.iter().chain(&c.logs) {
                        site.release(&f.local_path);
                    }
                    self.forget(&c.job_id);
                }
                Outcome::Success => self.finalize_success(site, c, run_id, r),
            }
        }
    }

    fn finalize_success(&mut self, site: &mut dyn LocalSite, c: Completion, run_id: RunId, r: &mut CycleReport) {
        let now = site.now();
        self.report(site, &c.job_id, JobState::Running, BATCH_FINISHED, r);
        self.report(site, &c.job_id, JobState::Transferring, "", r);
        let sends = if self.config.duplicate_registrations { 2 } else { 1 };
        let mut pending = BTreeSet::new();
        for out in &c.outputs {
            let ds = DatasetDescription {
                lfn: out.lfn.clone(),
                data_type: out.data_type.clone(),
                job_id: c.job_id.clone(),
                run_id: run_id.clone(),
                events: out.events,
                size_bytes: out.size_bytes,
                checksum: out.checksum,
                status: DatasetStatus::Pending,
            };
            match register_call(&ds) {
                Ok(call) => {
                    for _ in 0..sends {
                        let delivery = self.send_or_spool(ServiceKind::Bookkeeping, &call, Some(&c.job_id), now);
                        r.push(Action::Registered {
                            lfn: out.lfn.clone(),
                            delivery,
                        });
                    }
                }
                Err(e) => r.push(error("register", e)),
            }
            if self.enqueue(EntryKind::Dataset, &c.job_id, out, now, r) {
                pending.insert(out.lfn.clone());
            }
        }
        for log in &c.logs {
            self.enqueue(EntryKind::Log, &c.job_id, log, now, r);
        }
        if pending.is_empty() {
            let note = if c.outputs.is_empty() {
                "warning: job produced no output datasets"
            } else {
                "warning: outputs could not be cached"
            };
            self.report(site, &c.job_id, JobState::Done, note, r);
            r.push(Action::JobDone { job: c.job_id.clone() });
            self.forget(&c.job_id);
        } else if let Some(j) = self.state.jobs.get_mut(&c.job_id) {
            j.phase = Phase::Finalizing { pending };
        }
    }

    fn enqueue(&mut self, kind: EntryKind, job: &JobId, f: &ProducedFile, now: Timestamp, r: &mut CycleReport) -> bool {
        let entry = NewEntry {
            kind,
            local_path: f.local_path.clone(),
            destination: self.config.storage_element.clone(),
            lfn: Some(f.lfn.clone()),
            job_id: Some(job.clone()),
            checksum: Some(f.checksum),
            size_bytes: f.size_bytes,
            created_at: now,
        };
        match self.outbox.push(entry, &[]) {
            Ok(_) => {
                r.push(Action::Enqueued {
                    kind,
                    lfn: f.lfn.clone(),
                });
                true
            }
            Err(e) => {
                r.push(error("enqueue", e));
                false
            }
        }
    }

    fn complete_finished(&mut self, site: &mut dyn LocalSite, r: &mut CycleReport) {
        let finished: Vec<JobId> = self
            .state
            .jobs
            .iter()
            .filter(|(_, j)| matches!(&j.phase, Phase::Finalizing { pending } if pending.is_empty()))
            .map(|(id, _)| id.clone())
            .collect();
        for job in finished {
            self.report(site, &job, JobState::Done, "", r);
            r.push(Action::JobDone { job: job.clone() });
            self.forget(&job);
        }
    }

    fn capability(&mut self, site: &dyn LocalSite, occupancy: f64) -> ResourceCapability {
        let installed_software = if site.shared_area_writable() {
            match self.shared_area() {
                Ok(area) => area.list_installed().into_iter().map(|(sw, _)| sw).collect(),
                Err(_) => BTreeSet::new(),
            }
        } else {
            BTreeSet::new()
        };
        ResourceCapability {
            site_id: self.config.site_id.clone(),
            cpu_power: site.cpu_power(),
            free_disk_mb: site.free_disk_mb(),
            queue_occupancy: occupancy,
            installed_software,
        }
    }

    fn shared_area(&mut self) -> Result<&mut InstallArea, crate::swrepo::InstallError> {
        if self.shared_area.is_none() {
            self.shared_area = Some(InstallArea::open(&self.config.install_area, self.config.install_quota_bytes)?);
        }
        Ok(self.shared_area.as_mut().expect("just opened"))
    }

    fn pull(&mut self, site: &mut dyn LocalSite, r: &mut CycleReport) {
        for _ in 0..self.config.fill_target {
            let load = site.batch_load();
            let occupancy = compute_occupancy(load, site.slot_count());
            if occupancy >= self.config.occupancy_threshold || load.total() >= self.config.fill_target {
                r.push(Action::PullGated {
                    occupancy,
                    local_jobs: load.total(),
                });
                return;
            }
            let cap = self.capability(site, occupancy);
            match self.client.request_job(&cap) {
                Ok(None) => {
                    r.push(Action::NoWork);
                    return;
                }
                Ok(Some(job)) => {
                    r.push(Action::Pulled { job: job.job_id.clone() });
                    if !self.start_job(site, job, true, r) {
                        return;
                    }
                }
                Err(e) => {
                    r.push(Action::PullSkipped { reason: e.to_string() });
                    return;
                }
            }
        }
    }

    /// Installs software and submits. Returns false if the job failed here.
    fn start_job(&mut self, site: &mut dyn LocalSite, job: JobDescriptor, announce: bool, r: &mut CycleReport) -> bool {
        let id = job.job_id.clone();
        if announce {
            self.report(site, &id, JobState::Installing, "", r);
        }
        let job_local = !site.installs_remotely() && !site.shared_area_writable();
        let software_root = if site.installs_remotely() {
            None
        } else {
            match self.ensure_software(site, &job, job_local, r) {
                Ok(root) => Some(root),
                Err(reason) => {
                    if job_local {
                        let _ = fs::remove_dir_all(self.job_dir(&id));
                    }
                    r.push(Action::SoftwareUnavailable {
                        job: id.clone(),
                        reason: reason.clone(),
                    });
                    let note = format!("{}: {reason}", reasons::SOFTWARE_UNAVAILABLE);
                    self.report(site, &id, JobState::Failed, &note, r);
                    self.request_reschedule(site, &id, reasons::SOFTWARE_UNAVAILABLE, r);
                    return false;
                }
            }
        };
        let script = wrapper_script(&job, software_root.as_deref());
        let run_id = job.run_id.clone();
        let wrapper = JobWrapper {
            descriptor: job,
            software_root,
            script,
        };
        match site.submit(wrapper) {
            Ok(batch_id) => {
                self.state.jobs.insert(
                    id.clone(),
                    LocalJob {
                        run_id,
                        batch_id: batch_id.clone(),
                        phase: Phase::Submitted,
                        cpu_seconds: None,
                        job_local_area: job_local,
                    },
                );
                self.dirty = true;
                r.push(Action::Submitted {
                    job: id.clone(),
                    batch_id: batch_id.clone(),
                });
                if announce {
                    self.report(site, &id, JobState::Submitted, &format!("batch {batch_id}"), r);
                }
                true
            }
            Err(e) => {
                if job_local {
                    let _ = fs::remove_dir_all(self.job_dir(&id));
                }
                r.push(Action::SubmitFailed {
                    job: id.clone(),
                    reason: e.0.clone(),
                });
                let note = format!("{}: {}", reasons::BATCH_SUBMISSION, e.0);
                self.report(site, &id, JobState::Failed, &note, r);
                self.request_reschedule(site, &id, reasons::BATCH_SUBMISSION, r);
                false
            }
        }
    }

    /// Installs every package the job needs, into the shared area or, when
    /// that is read-only, into an area private to the job.
    fn ensure_software(
        &mut self,
        site: &dyn LocalSite,
        job: &JobDescriptor,
        job_local: bool,
        r: &mut CycleReport,
    ) -> Result<PathBuf, String> {
        let now = site.now();
        let mut local_area;
        let client = self.client.clone();
        let area: &mut InstallArea = if job_local {
            local_area = InstallArea::open(self.job_dir(&job.job_id).join("sw"), None).map_err(|e| e.to_string())?;
            &mut local_area
        } else {
            self.shared_area().map_err(|e| e.to_string())?
        };
        for sw in &job.requirements.software {
            let report = area.install(&client, sw, now).map_err(|e| e.to_string())?;
            for (software, outcome) in report.steps {
                r.push(Action::Software {
                    job: job.job_id.clone(),
                    software,
                    outcome,
                });
            }
        }
        Ok(area.root().to_path_buf())
    }
}

struct Flush {
    budget: u32,
    attempted: BTreeSet<u64>,
}

fn error(context: &str, e: impl std::fmt::Display) -> Action {
    Action::Error {
        context: context.into(),
        message: e.to_string(),
    }
}

/// Transport for an agent on a worker node without outbound connectivity:
/// monitoring messages are queued for the site's relaying agent, every
/// other call goes through `inner`.
pub struct RelayTransport {
    inner: Arc<dyn Transport>,
    queue: Arc<Mutex<Vec<StatusMessage>>>,
}

impl RelayTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        RelayTransport {
            inner,
            queue: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Handle to the queue the relaying agent drains.
    pub fn queue(&self) -> Arc<Mutex<Vec<StatusMessage>>> {
        self.queue.clone()
    }

    pub fn drain(&self) -> Vec<StatusMessage> {
        std::mem::take(&mut *self.queue.lock())
    }
}

impl Transport for RelayTransport {
    fn call(&self, kind: ServiceKind, call: &RpcCall) -> Result<RpcReply, TransportError> {
        if kind != ServiceKind::Monitoring || call.method != "reportStatus" {
            return self.inner.call(kind, call);
        }
        let msg = call
            .params
            .first()
            .ok_or_else(|| TransportError::Unreachable("monitoring", "empty report".into()))
            .and_then(|v| crate::wire::status_from_rpc(v).map_err(TransportError::from))?;
        self.queue.lock().push(msg);
        Ok(RpcReply::Value(true.into()))
    }
}
