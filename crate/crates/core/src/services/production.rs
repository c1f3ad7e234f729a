use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::jobs::{self, JobEvent};
use super::{reasons, Clock};
use crate::model::{
    check_steps, match_job, split_run, IllegalTransition, JobDescriptor, JobId, JobRecord, JobRequirements,
    JobState, PipelineError, ProductionRun, ResourceCapability, RunId, SiteId, SplitError, WorkflowDefinition,
    WorkflowId,
};
use crate::store::{Store, StoreError, Table};

#[derive(Debug, Error)]
pub enum ProdError {
    #[error("unknown workflow {0}")]
    UnknownWorkflow(WorkflowId),
    #[error("unknown run {0}")]
    UnknownRun(RunId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job is in state {0}")]
    IllegalState(JobState),
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(PipelineError),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid resource capability")]
    InvalidCapability,
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<IllegalTransition> for ProdError {
    fn from(e: IllegalTransition) -> Self {
        ProdError::IllegalState(e.from)
    }
}

#[derive(Clone, Debug)]
pub struct ProductionConfig {
    pub max_reschedules: u32,
}

impl Default for ProductionConfig {
    fn default() -> Self {
        ProductionConfig { max_reschedules: 3 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CreateRun {
    pub workflow_id: WorkflowId,
    pub total_events: u64,
    pub events_per_job: u64,
    pub extra_options: BTreeMap<String, String>,
    pub destination_site: Option<SiteId>,
    /// Client-chosen request token; repeating a token returns the first result.
    pub token: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: ProductionRun,
    pub job_count: u32,
}

/// Matching data for one Waiting job, so a request never decodes descriptors
/// or records of jobs it does not take.
#[derive(Serialize, Deserialize)]
struct WaitingEntry {
    requirements: JobRequirements,
    excluded_sites: BTreeSet<SiteId>,
}

pub struct ProductionService {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    config: ProductionConfig,
}

impl ProductionService {
    pub fn new(store: Arc<Store>, clock: Arc<dyn Clock>, config: ProductionConfig) -> Self {
        ProductionService { store, clock, config }
    }

    pub fn config(&self) -> &ProductionConfig {
        &self.config
    }

    /// Stores a new workflow version. An empty `workflow_id` gets a fresh one;
    /// version and creation time are always assigned here.
    pub fn define_workflow(&self, mut wf: WorkflowDefinition) -> Result<WorkflowId, ProdError> {
        check_steps(&wf.steps).map_err(ProdError::InvalidPipeline)?;
        if wf.name.trim().is_empty() {
            return Err(ProdError::InvalidParameters("workflow name is empty".into()));
        }
        let now = self.clock.now();
        self.store.transact(|txn| {
            if wf.workflow_id.as_str().is_empty() {
                wf.workflow_id = WorkflowId::new(format!("wf-{:06}", txn.next_id("workflow")?));
            } else if txn.contains(Table::Workflows, wf.workflow_id.as_str()) {
                return Err(ProdError::DuplicateId(wf.workflow_id.to_string()));
            }
            let version_key = format!("wfversion/{}", wf.name);
            wf.version = txn.get_json::<u32>(Table::Meta, &version_key)?.unwrap_or(0) + 1;
            wf.created_at = now;
            txn.put_json(Table::Meta, &version_key, &wf.version)?;
            txn.put_json(Table::Workflows, wf.workflow_id.as_str(), &wf)?;
            Ok(wf.workflow_id.clone())
        })
    }

    pub fn get_workflow(&self, id: &WorkflowId) -> Result<WorkflowDefinition, ProdError> {
        self.store.transact(|txn| {
            txn.get_json(Table::Workflows, id.as_str())?
                .ok_or_else(|| ProdError::UnknownWorkflow(id.clone()))
        })
    }

    pub fn list_workflows(&self) -> Result<Vec<WorkflowDefinition>, ProdError> {
        self.store.transact(|txn| {
            Ok(txn
                .scan_json::<WorkflowDefinition>(Table::Workflows, "")?
                .into_iter()
                .map(|(_, w)| w)
                .collect())
        })
    }

    pub fn create_run(&self, req: &CreateRun) -> Result<(RunId, u32), ProdError> {
        if req.events_per_job == 0 || req.total_events < req.events_per_job {
            return Err(ProdError::InvalidParameters(format!(
                "need total_events >= events_per_job >= 1, got {} and {}",
                req.total_events, req.events_per_job
            )));
        }
        let now = self.clock.now();
        self.store.transact(|txn| {
            let token_key = req.token.as_ref().map(|t| format!("runtoken/{t}"));
            if let Some(key) = &token_key {
                if let Some(prev) = txn.get_json::<(RunId, u32)>(Table::Meta, key)? {
                    return Ok(prev);
                }
            }
            let wf: WorkflowDefinition = txn
                .get_json(Table::Workflows, req.workflow_id.as_str())?
                .ok_or_else(|| ProdError::UnknownWorkflow(req.workflow_id.clone()))?;
            let run_id = RunId::new(format!("run-{:06}", txn.next_id("run")?));
            let run = ProductionRun {
                run_id: run_id.clone(),
                workflow_id: wf.workflow_id.clone(),
                total_events: req.total_events,
                events_per_job: req.events_per_job,
                extra_options: req.extra_options.clone(),
                destination_site: req.destination_site.clone(),
                created_at: now,
            };
            let descriptors = split_run(&run, &wf).map_err(|e| match e {
                SplitError::InvalidParameters(m) => ProdError::InvalidParameters(m),
                other => ProdError::InvalidParameters(other.to_string()),
            })?;
            let job_count = descriptors.len() as u32;
            for d in &descriptors {
                let mut rec = JobRecord::new(d.job_id.clone(), now);
                jobs::append_event(txn, &d.job_id, &JobEvent::service(&rec, now, ""))?;
                jobs::service_transition::<ProdError>(txn, &mut rec, JobState::Waiting, now, "queued")?;
                jobs::save(txn, &rec)?;
                txn.put_json(Table::Descriptors, d.job_id.as_str(), d)?;
                txn.put_json(
                    Table::Waiting,
                    d.job_id.as_str(),
                    &WaitingEntry {
                        requirements: d.requirements.clone(),
                        excluded_sites: BTreeSet::new(),
                    },
                )?;
            }
            txn.put_json(Table::Runs, run_id.as_str(), &RunSummary { run, job_count })?;
            if let Some(key) = &token_key {
                txn.put_json(Table::Meta, key, &(run_id.clone(), job_count))?;
            }
            Ok((run_id, job_count))
        })
    }

    /// Serves the first matching Waiting job in (run, sequence) order, or
    /// `None`. The claim happens inside one transaction.
    pub fn request_job(&self, cap: &ResourceCapability) -> Result<Option<JobDescriptor>, ProdError> {
        if !cap.is_valid() {
            return Err(ProdError::InvalidCapability);
        }
        let now = self.clock.now();
        self.store.transact(|txn| {
            let mut chosen = None;
            for (key, raw) in txn.scan(Table::Waiting, "") {
                let entry: WaitingEntry =
                    serde_json::from_slice(raw).map_err(|e| StoreError::Codec(e.to_string()))?;
                if !entry.excluded_sites.contains(&cap.site_id) && match_job(&entry.requirements, cap) {
                    chosen = Some(JobId::new(key));
                    break;
                }
            }
            let Some(job_id) = chosen else {
                return Ok(None);
            };
            let mut rec = jobs::load(txn, &job_id)?.ok_or_else(|| ProdError::UnknownJob(job_id.clone()))?;
            rec.site = Some(cap.site_id.clone());
            jobs::service_transition::<ProdError>(
                txn,
                &mut rec,
                JobState::Assigned,
                now,
                &format!("assigned to {}", cap.site_id),
            )?;
            jobs::save(txn, &rec)?;
            txn.delete(Table::Waiting, job_id.as_str());
            let desc = txn
                .get_json::<JobDescriptor>(Table::Descriptors, job_id.as_str())?
                .ok_or_else(|| ProdError::UnknownJob(job_id.clone()))?;
            Ok(Some(desc))
        })
    }

    /// Moves an active or Failed job back to Waiting while attempts remain.
    /// When `site` is given the job must currently belong to that site, so a
    /// replayed request cannot disturb a later assignment.
    pub fn reschedule(&self, job_id: &JobId, reason: &str, site: Option<&SiteId>) -> Result<JobState, ProdError> {
        let now = self.clock.now();
        self.store.transact(|txn| {
            let mut rec = jobs::load(txn, job_id)?.ok_or_else(|| ProdError::UnknownJob(job_id.clone()))?;
            if let Some(site) = site {
                if rec.site.as_ref() != Some(site) {
                    return Err(ProdError::IllegalState(rec.state));
                }
            }
            match rec.state {
                JobState::Failed => {}
                s if s.is_active() => {
                    jobs::service_transition::<ProdError>(txn, &mut rec, JobState::Failed, now, reason)?
                }
                s => return Err(ProdError::IllegalState(s)),
            }
            if reasons::is_site_fault(reason) {
                if let Some(site) = rec.site.clone() {
                    rec.excluded_sites.insert(site);
                }
            }
            if rec.attempt < self.config.max_reschedules {
                rec.attempt += 1;
                rec.site = None;
                rec.batch_id = None;
                rec.last_report = None;
                rec.cpu_seconds = None;
                jobs::service_transition::<ProdError>(
                    txn,
                    &mut rec,
                    JobState::Waiting,
                    now,
                    &format!("rescheduled: {reason}"),
                )?;
                let desc = txn
                    .get_json::<JobDescriptor>(Table::Descriptors, job_id.as_str())?
                    .ok_or_else(|| ProdError::UnknownJob(job_id.clone()))?;
                txn.put_json(
                    Table::Waiting,
                    job_id.as_str(),
                    &WaitingEntry {
                        requirements: desc.requirements,
                        excluded_sites: rec.excluded_sites.clone(),
                    },
                )?;
            } else {
                let ev = JobEvent::service(&rec, now.max(rec.last_update), "attempts exhausted");
                jobs::append_event(txn, job_id, &ev)?;
            }
            jobs::save(txn, &rec)?;
            Ok(rec.state)
        })
    }

    /// Non-zero state counts of a run.
    pub fn run_status(&self, run_id: &RunId) -> Result<BTreeMap<JobState, u64>, ProdError> {
        self.store.transact(|txn| {
            if !txn.contains(Table::Runs, run_id.as_str()) {
                return Err(ProdError::UnknownRun(run_id.clone()));
            }
            let mut counts = BTreeMap::new();
            for (_, rec) in txn.scan_json::<JobRecord>(Table::Jobs, &format!("{}-", run_id.as_str()))? {
                *counts.entry(rec.state).or_insert(0) += 1;
            }
            Ok(counts)
        })
    }

    pub fn list_runs(&self) -> Result<Vec<RunSummary>, ProdError> {
        self.store.transact(|txn| {
            Ok(txn
                .scan_json::<RunSummary>(Table::Runs, "")?
                .into_iter()
                .map(|(_, r)| r)
                .collect())
        })
    }

    pub fn job(&self, job_id: &JobId) -> Result<JobRecord, ProdError> {
        self.store
            .transact(|txn| jobs::load(txn, job_id)?.ok_or_else(|| ProdError::UnknownJob(job_id.clone())))
    }

    pub fn descriptor(&self, job_id: &JobId) -> Result<JobDescriptor, ProdError> {
        self.store.transact(|txn| {
            txn.get_json(Table::Descriptors, job_id.as_str())?
                .ok_or_else(|| ProdError::UnknownJob(job_id.clone()))
        })
    }

    pub fn jobs_of_run(&self, run_id: &RunId) -> Result<Vec<JobRecord>, ProdError> {
        self.store.transact(|txn| {
            if !txn.contains(Table::Runs, run_id.as_str()) {
                return Err(ProdError::UnknownRun(run_id.clone()));
            }
            Ok(txn
                .scan_json::<JobRecord>(Table::Jobs, &format!("{}-", run_id.as_str()))?
                .into_iter()
                .map(|(_, r)| r)
                .collect())
        })
    }

    pub fn all_jobs(&self) -> Result<Vec<JobRecord>, ProdError> {
        self.store.transact(|txn| {
            Ok(txn
                .scan_json::<JobRecord>(Table::Jobs, "")?
                .into_iter()
                .map(|(_, r)| r)
                .collect())
        })
    }

    pub fn waiting_count(&self) -> usize {
        self.store.len(Table::Waiting)
    }
}
