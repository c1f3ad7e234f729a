use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::clock::SimClock;
use super::{SiteConfig, Workload};
use crate::agent::{BatchLoad, Completion, JobWrapper, LocalSite, Outcome, ProducedFile, Receipt, SubmitError, TransferError};
use crate::model::{dataset_lfn, JobDescriptor, JobState, SiteId, Timestamp};
use crate::services::StatusMessage;

/// One line of the simulation trace.
#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent {
    pub time: Timestamp,
    pub kind: String,
    pub detail: String,
}

/// A file that reached a storage element.
#[derive(Clone, Debug, PartialEq)]
pub struct Delivered {
    pub storage_element: String,
    pub lfn: String,
    pub url: String,
    pub size_bytes: u64,
    pub checksum: u32,
    pub at: Timestamp,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BatchJobState {
    Queued,
    Running,
    Completed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStatus {
    pub queued: u32,
    pub running: u32,
    pub slot_count: u32,
    pub jobs: BTreeMap<String, BatchJobState>,
}

#[derive(Clone, Debug)]
struct BatchJob {
    descriptor: JobDescriptor,
    outcome: Outcome,
    state: BatchJobState,
}

#[derive(Clone, Debug)]
enum SiteEvent {
    StepStart { batch_id: String, step: usize },
    JobEnd { batch_id: String },
}

#[derive(Clone, Debug)]
struct StoredFile {
    size_bytes: u64,
    checksum: u32,
}

/// Checksum the simulator assigns to a produced file.
pub fn synthetic_checksum(lfn: &str, size_bytes: u64, offset: u64) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(lfn.as_bytes());
    h.update(&size_bytes.to_le_bytes());
    h.update(&offset.to_le_bytes());
    h.finalize()
}

/// A simulated site: a FIFO batch queue over a fixed number of slots, local
/// storage, and a WAN link with injected failures.
pub struct SimSite {
    config: SiteConfig,
    workload: Workload,
    report_as: SiteId,
    clock: SimClock<SiteEvent>,
    rng: ChaCha8Rng,
    jobs: BTreeMap<String, BatchJob>,
    queue: VecDeque<String>,
    running: BTreeSet<String>,
    completed: Vec<Completion>,
    storage: BTreeMap<String, StoredFile>,
    log: Vec<SimEvent>,
    messages: Vec<StatusMessage>,
    deliveries: Vec<Delivered>,
    next_batch: u64,
    submitted: u64,
    finished: u64,
}

impl SimSite {
    pub fn new(config: SiteConfig, workload: Workload) -> Self {
        SimSite {
            rng: ChaCha8Rng::seed_from_u64(config.failure_policy.rng_seed),
            report_as: config.site_id.clone(),
            config,
            workload,
            clock: SimClock::default(),
            jobs: BTreeMap::new(),
            queue: VecDeque::new(),
            running: BTreeSet::new(),
            completed: Vec::new(),
            storage: BTreeMap::new(),
            log: Vec::new(),
            messages: Vec::new(),
            deliveries: Vec::new(),
            next_batch: 1,
            submitted: 0,
            finished: 0,
        }
    }

    /// Worker-node status messages carry `id` instead of this site's own id.
    pub fn reporting_as(mut self, id: SiteId) -> Self {
        self.report_as = id;
        self
    }

    pub fn config(&self) -> &SiteConfig {
        &self.config
    }

    pub fn site_id(&self) -> &SiteId {
        &self.config.site_id
    }

    fn record(&mut self, kind: &str, detail: String) {
        self.log.push(SimEvent {
            time: self.clock.now(),
            kind: kind.to_string(),
            detail,
        });
    }

    /// Nominal single-CPU runtime of a job, before scaling by cpu power.
    pub fn nominal_runtime_ms(&self, job: &JobDescriptor) -> u64 {
        job.resolved_steps.len() as u64 * job.events * self.workload.cpu_ms_per_event
    }

    fn step_ms(&self, job: &JobDescriptor) -> u64 {
        ((job.events * self.workload.cpu_ms_per_event) as f64 / self.config.cpu_power).round() as u64
    }

    pub fn batch_submit(&mut self, job: &JobDescriptor) -> Result<String, SubmitError> {
        let p = self.config.failure_policy.clone();
        if self.rng.gen::<f64>() < p.submission_failure_prob {
            self.record("batch_refused", format!("job={}", job.job_id));
            return Err(SubmitError(format!("batch system at {} refused the job", self.config.site_id)));
        }
        let u: f64 = self.rng.gen();
        let mut outcome = if u < p.app_failure_prob {
            Outcome::AppFailure
        } else if u < p.app_failure_prob + p.site_failure_prob {
            Outcome::SiteFailure
        } else if u < p.app_failure_prob + p.site_failure_prob + p.transfer_loss_prob {
            Outcome::TransferLoss
        } else {
            Outcome::Success
        };
        if p.site_failure_per_hour > 0.0 {
            let hours = (self.step_ms(job) * job.resolved_steps.len() as u64) as f64 / 3_600_000.0;
            let survive = (-p.site_failure_per_hour * hours).exp();
            if self.rng.gen::<f64>() >= survive && outcome == Outcome::Success {
                outcome = Outcome::SiteFailure;
            }
        }
        let batch_id = format!("{}.{}", self.config.site_id, self.next_batch);
        self.next_batch += 1;
        self.submitted += 1;
        self.jobs.insert(
            batch_id.clone(),
            BatchJob {
                descriptor: job.clone(),
                outcome,
                state: BatchJobState::Queued,
            },
        );
        self.queue.push_back(batch_id.clone());
        self.record("batch_submit", format!("job={} batch={batch_id}", job.job_id));
        self.start_queued();
        Ok(batch_id)
    }

    fn start_queued(&mut self) {
        while self.running.len() < self.config.slot_count as usize {
            let Some(batch_id) = self.queue.pop_front() else {
                return;
            };
            let now = self.clock.now();
            let job = self.jobs.get_mut(&batch_id).expect("queued job exists");
            job.state = BatchJobState::Running;
            let desc = job.descriptor.clone();
            let step = self.step_ms(&desc);
            for k in 0..desc.resolved_steps.len() {
                self.clock.schedule(
                    now.plus_millis(step * k as u64),
                    SiteEvent::StepStart {
                        batch_id: batch_id.clone(),
                        step: k,
                    },
                );
            }
            self.clock.schedule(
                now.plus_millis(step * desc.resolved_steps.len() as u64),
                SiteEvent::JobEnd {
                    batch_id: batch_id.clone(),
                },
            );
            self.running.insert(batch_id.clone());
            self.record("batch_start", format!("job={} batch={batch_id}", desc.job_id));
        }
    }

    pub fn batch_status(&self) -> BatchStatus {
        BatchStatus {
            queued: self.queue.len() as u32,
            running: self.running.len() as u32,
            slot_count: self.config.slot_count,
            jobs: self.jobs.iter().map(|(k, j)| (k.clone(), j.state)).collect(),
        }
    }

    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    pub fn finished(&self) -> u64 {
        self.finished
    }

    pub fn next_event_time(&self) -> Option<Timestamp> {
        self.clock.next_time()
    }

    /// Fires every event due at or before `until`, in time order.
    pub fn advance(&mut self, until: Timestamp) -> Vec<SimEvent> {
        let first = self.log.len();
        while let Some((_, event)) = self.clock.pop_due(until) {
            match event {
                SiteEvent::StepStart { batch_id, step } => self.step_start(&batch_id, step),
                SiteEvent::JobEnd { batch_id } => self.job_end(&batch_id),
            }
        }
        self.clock.settle(until);
        self.log[first..].to_vec()
    }

    fn step_start(&mut self, batch_id: &str, step: usize) {
        let job = &self.jobs[batch_id].descriptor;
        let app = job.resolved_steps[step].application.clone();
        let msg = StatusMessage {
            job_id: job.job_id.clone(),
            reported_state: JobState::Running,
            step_index: Some(step as u32),
            note: format!("step {step} {app}"),
            site_id: self.report_as.clone(),
            timestamp: self.clock.now(),
            cpu_seconds: None,
        };
        let detail = format!("job={} batch={batch_id} step={step} app={app}", job.job_id);
        self.messages.push(msg);
        self.record("step_start", detail);
    }

    fn job_end(&mut self, batch_id: &str) {
        self.running.remove(batch_id);
        self.finished += 1;
        let job = self.jobs.get_mut(batch_id).expect("running job exists");
        job.state = BatchJobState::Completed;
        let (desc, outcome) = (job.descriptor.clone(), job.outcome);
        let mut outputs = Vec::new();
        let mut logs = Vec::new();
        if outcome == Outcome::Success {
            for (k, step) in desc.resolved_steps.iter().enumerate() {
                for ty in &step.output_types {
                    let lfn = dataset_lfn(&desc, k, ty);
                    let size_bytes = desc.events * self.workload.bytes_per_event;
                    outputs.push(self.store_file(&lfn, size_bytes, desc.first_event_offset, ty, k, desc.events));
                }
            }
            let lfn = format!("/pullgrid/{}/{:08}/{batch_id}.log", desc.run_id, desc.sequence_index);
            logs.push(self.store_file(&lfn, self.workload.log_bytes, desc.first_event_offset, "LOG", 0, 0));
        }
        let cpu_seconds = self.nominal_runtime_ms(&desc) as f64 / 1000.0;
        self.record(
            "batch_end",
            format!("job={} batch={batch_id} outcome={}", desc.job_id, outcome.as_str()),
        );
        self.completed.push(Completion {
            batch_id: batch_id.to_string(),
            job_id: desc.job_id,
            outcome,
            outputs,
            logs,
            cpu_seconds,
        });
        self.start_queued();
    }

    fn store_file(&mut self, lfn: &str, size_bytes: u64, offset: u64, ty: &str, step: usize, events: u64) -> ProducedFile {
        let checksum = synthetic_checksum(lfn, size_bytes, offset);
        let local_path = format!("/sim/{}{lfn}", self.config.site_id);
        self.storage.insert(local_path.clone(), StoredFile { size_bytes, checksum });
        ProducedFile {
            local_path,
            lfn: lfn.to_string(),
            data_type: ty.to_string(),
            step: step as u32,
            size_bytes,
            checksum,
            events,
        }
    }

    /// One WAN transfer attempt of `size_bytes`; returns whether it succeeded
    /// and how long it took in simulated milliseconds.
    pub fn wan_transfer(&mut self, size_bytes: u64) -> (bool, u64) {
        let ok = self.rng.gen::<f64>() >= self.config.failure_policy.transfer_failure_prob;
        let ms = (size_bytes as f64 / self.workload.bandwidth_bytes_per_s * 1000.0).round() as u64;
        (ok, ms)
    }

    pub fn local_files(&self) -> usize {
        self.storage.len()
    }

    pub fn used_bytes(&self) -> u64 {
        self.storage.values().map(|f| f.size_bytes).sum()
    }

    pub fn drain_log(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.log)
    }

    /// Status messages emitted by worker nodes since the last drain.
    pub fn drain_messages(&mut self) -> Vec<StatusMessage> {
        std::mem::take(&mut self.messages)
    }

    pub fn drain_deliveries(&mut self) -> Vec<Delivered> {
        std::mem::take(&mut self.deliveries)
    }
}

impl LocalSite for SimSite {
    fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn slot_count(&self) -> u32 {
        self.config.slot_count
    }

    fn cpu_power(&self) -> f64 {
        self.config.cpu_power
    }

    fn free_disk_mb(&self) -> u64 {
        self.config.disk_quota_mb.saturating_sub(self.used_bytes() >> 20)
    }

    fn shared_area_writable(&self) -> bool {
        self.config.shared_area_writable
    }

    fn batch_load(&self) -> BatchLoad {
        BatchLoad {
            queued: self.queue.len() as u32,
            running: self.running.len() as u32,
        }
    }

    fn submit(&mut self, wrapper: JobWrapper) -> Result<String, SubmitError> {
        self.batch_submit(&wrapper.descriptor)
    }

    fn take_completed(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.completed)
    }

    fn transfer(&mut self, local_path: &str, storage_element: &str, lfn: &str) -> Result<Receipt, TransferError> {
        let Some(file) = self.storage.get(local_path).cloned() else {
            self.record("transfer", format!("lfn={lfn} missing local copy"));
            return Err(TransferError(format!("no local copy at {local_path}")));
        };
        let (ok, ms) = self.wan_transfer(file.size_bytes);
        let secs = ms as f64 / 1000.0;
        if !ok {
            self.record("transfer", format!("lfn={lfn} to={storage_element} bytes={} secs={secs:.3} failed", file.size_bytes));
            return Err(TransferError("wan transfer failed".into()));
        }
        let url = format!("sim://{storage_element}{lfn}");
        self.record("transfer", format!("lfn={lfn} to={storage_element} bytes={} secs={secs:.3} ok", file.size_bytes));
        self.deliveries.push(Delivered {
            storage_element: storage_element.to_string(),
            lfn: lfn.to_string(),
            url: url.clone(),
            size_bytes: file.size_bytes,
            checksum: file.checksum,
            at: self.clock.now(),
        });
        Ok(Receipt {
            url,
            checksum: file.checksum,
        })
    }

    fn release(&mut self, local_path: &str) {
        self.storage.remove(local_path);
    }
}
