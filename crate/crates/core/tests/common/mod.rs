#![allow(dead_code)]
pub mod strategies;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use pullgrid::agent::{
    Agent, AgentConfig, BatchLoad, Completion, JobWrapper, LocalSite, Outcome, ProducedFile, Receipt, SubmitError,
    TransferError,
};
use pullgrid::client::LoopbackTransport;
use pullgrid::model::{dataset_lfn, JobDescriptor, JobId, RunId, SoftwareRef, StepDefinition, Timestamp, WorkflowDefinition, WorkflowId};
use pullgrid::services::{CreateRun, ManualClock, Services, ServicesConfig};
use pullgrid::store::Store;
use pullgrid::swrepo::PackageBuilder;

pub struct Central {
    pub services: Arc<Services>,
    pub transport: Arc<LoopbackTransport>,
    pub clock: ManualClock,
}

impl Central {
    pub fn new() -> Self {
        Self::with_config(ServicesConfig::default())
    }

    pub fn with_config(config: ServicesConfig) -> Self {
        let clock = ManualClock::new(Timestamp::ZERO);
        let services = Arc::new(Services::new(Arc::new(Store::in_memory()), Arc::new(clock.clone()), config));
        let transport = Arc::new(LoopbackTransport::new(services.clone()));
        Central {
            services,
            transport,
            clock,
        }
    }

    pub fn publish(&self, app: &str, version: &str, deps: &[SoftwareRef]) {
        let mut b = PackageBuilder::new(app, version).file("share/VERSION", version.as_bytes().to_vec());
        for d in deps {
            b = b.depends_on(d.clone());
        }
        self.services.software.publish(&b.build().unwrap()).unwrap();
    }

    pub fn workflow(&self, steps: Vec<StepDefinition>) -> WorkflowId {
        self.services
            .production
            .define_workflow(WorkflowDefinition {
                workflow_id: WorkflowId::new(""),
                name: "mc".into(),
                version: 1,
                steps,
                created_at: Timestamp::ZERO,
            })
            .unwrap()
    }

    /// One-step Gauss:v1 workflow producing SIM; returns the run.
    pub fn simple_run(&self, jobs: u32) -> RunId {
        let wf = self.workflow(vec![StepDefinition::new("Gauss", "v1").output("SIM")]);
        self.run(&wf, jobs)
    }

    pub fn run(&self, wf: &WorkflowId, jobs: u32) -> RunId {
        let (run, n) = self
            .services
            .production
            .create_run(&CreateRun {
                workflow_id: wf.clone(),
                total_events: jobs as u64 * 10,
                events_per_job: 10,
                ..CreateRun::default()
            })
            .unwrap();
        assert_eq!(n, jobs);
        run
    }

    pub fn agent(&self, site: &str, dir: &Path) -> Agent {
        self.agent_with(AgentConfig::new(site, dir.join(site)))
    }

    pub fn agent_with(&self, config: AgentConfig) -> Agent {
        Agent::open(config, self.transport.clone()).unwrap()
    }

    pub fn state(&self, job: &JobId) -> pullgrid::model::JobState {
        self.services.production.job(job).unwrap().state
    }

    pub fn calls(&self, kind: pullgrid::services::ServiceKind, method: &str) -> usize {
        self.transport.call_count(kind, method)
    }
}

/// A batch system driven by hand: jobs run until `complete` is called, and
/// each transfer consumes the next scripted result (success when empty).
pub struct ScriptedSite {
    pub now: Timestamp,
    pub slots: u32,
    pub cpu: f64,
    pub shared_writable: bool,
    pub refuse_submit: bool,
    pub queued: u32,
    pub submitted: Vec<(String, JobWrapper)>,
    pub finished: Vec<Completion>,
    pub transfer_script: VecDeque<bool>,
    pub transfer_fail_rng: Option<(rand_chacha::ChaCha8Rng, f64)>,
    pub files: BTreeMap<String, u32>,
    pub released: BTreeSet<String>,
    pub transfers: Vec<(String, bool)>,
    pub outputs_per_job: usize,
    pub with_logs: bool,
    next_batch: u32,
}

impl ScriptedSite {
    pub fn new(slots: u32) -> Self {
        ScriptedSite {
            now: Timestamp::from_secs(1),
            slots,
            cpu: 1.0,
            shared_writable: true,
            refuse_submit: false,
            queued: 0,
            submitted: Vec::new(),
            finished: Vec::new(),
            transfer_script: VecDeque::new(),
            transfer_fail_rng: None,
            files: BTreeMap::new(),
            released: BTreeSet::new(),
            transfers: Vec::new(),
            outputs_per_job: 1,
            with_logs: false,
            next_batch: 0,
        }
    }

    pub fn running(&self) -> usize {
        self.submitted.len()
    }

    pub fn job_ids(&self) -> Vec<JobId> {
        self.submitted.iter().map(|(_, w)| w.descriptor.job_id.clone()).collect()
    }

    /// Finishes every running job with `outcome`.
    pub fn complete_all(&mut self, outcome: Outcome) {
        for (batch, w) in std::mem::take(&mut self.submitted) {
            let c = self.completion(&batch, &w.descriptor, outcome);
            self.finished.push(c);
        }
    }

    fn completion(&mut self, batch: &str, job: &JobDescriptor, outcome: Outcome) -> Completion {
        let mut outputs = Vec::new();
        let mut logs = Vec::new();
        if outcome == Outcome::Success {
            for k in 0..self.outputs_per_job {
                let lfn = format!("{}.{k}", dataset_lfn(job, 0, "SIM"));
                outputs.push(self.file(&lfn, "SIM", job.events));
            }
            if self.with_logs {
                let lfn = format!("/logs/{}.log", job.job_id);
                logs.push(self.file(&lfn, "LOG", 0));
            }
        }
        Completion {
            batch_id: batch.to_string(),
            job_id: job.job_id.clone(),
            outcome,
            outputs,
            logs,
            cpu_seconds: 100.0,
        }
    }

    fn file(&mut self, lfn: &str, data_type: &str, events: u64) -> ProducedFile {
        let local_path = format!("/scratch{lfn}");
        let checksum = crc32fast::hash(lfn.as_bytes());
        self.files.insert(local_path.clone(), checksum);
        ProducedFile {
            local_path,
            lfn: lfn.to_string(),
            data_type: data_type.to_string(),
            step: 0,
            size_bytes: 1000,
            checksum,
            events,
        }
    }
}

impl LocalSite for ScriptedSite {
    fn now(&self) -> Timestamp {
        self.now
    }
    fn slot_count(&self) -> u32 {
        self.slots
    }
    fn cpu_power(&self) -> f64 {
        self.cpu
    }
    fn free_disk_mb(&self) -> u64 {
        100_000
    }
    fn shared_area_writable(&self) -> bool {
        self.shared_writable
    }
    fn batch_load(&self) -> BatchLoad {
        BatchLoad {
            queued: self.queued,
            running: self.submitted.len() as u32,
        }
    }
    fn submit(&mut self, wrapper: JobWrapper) -> Result<String, SubmitError> {
        if self.refuse_submit {
            return Err(SubmitError("queue closed".into()));
        }
        self.next_batch += 1;
        let id = format!("b{}", self.next_batch);
        self.submitted.push((id.clone(), wrapper));
        Ok(id)
    }
    fn take_completed(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.finished)
    }
    fn transfer(&mut self, local_path: &str, storage_element: &str, lfn: &str) -> Result<Receipt, TransferError> {
        use rand::Rng;
        let Some(&checksum) = self.files.get(local_path) else {
            return Err(TransferError(format!("{local_path} missing")));
        };
        let ok = match (&mut self.transfer_fail_rng, self.transfer_script.pop_front()) {
            (_, Some(ok)) => ok,
            (Some((rng, p)), None) => !rng.gen_bool(*p),
            (None, None) => true,
        };
        self.transfers.push((lfn.to_string(), ok));
        if ok {
            Ok(Receipt {
                url: format!("test://{storage_element}{lfn}"),
                checksum,
            })
        } else {
            Err(TransferError("link down".into()))
        }
    }
    fn release(&mut self, local_path: &str) {
        self.files.remove(local_path);
        self.released.insert(local_path.to_string());
    }
}
