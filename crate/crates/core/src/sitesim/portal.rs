//! A site fronting a sub-grid. Jobs are shipped as a sandbox (job XML plus
//! agent settings) to an inner worker node, where a nested agent installs
//! the software and runs the job like any production site would.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::site::{Delivered, SimEvent, SimSite};
use super::{SimError, SiteConfig, Workload};
use crate::agent::{
    Action, Agent, AgentConfig, BatchLoad, Completion, JobWrapper, LocalSite, Outcome, Receipt, RelayTransport,
    SubmitError, TransferError,
};
use crate::client::Transport;
use crate::model::{JobId, SiteId, Timestamp};
use crate::protocol::{job_from_xml, job_to_xml};
use crate::services::StatusMessage;

/// How a worker-node message leaves the sub-grid.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MessagePath {
    Direct,
    Relay,
}

struct Sandbox {
    grid_id: String,
    wn: usize,
    job_xml: Vec<u8>,
}

struct WorkerNode {
    site: SimSite,
    agent: Agent,
    relay: Option<Arc<RelayTransport>>,
}

struct GridJob {
    job_id: JobId,
    wn: usize,
    dispatched: bool,
}

pub struct PortalSite {
    id: SiteId,
    wns: Vec<WorkerNode>,
    pending: Vec<Sandbox>,
    grid_jobs: BTreeMap<String, GridJob>,
    completed: Vec<Completion>,
    log: Vec<(SiteId, SimEvent)>,
    now: Timestamp,
    next_grid: u64,
}

impl PortalSite {
    /// `template` supplies the storage element and outbox budget of the
    /// nested agents; their work areas live under `work_dir`.
    pub fn new(
        id: SiteId,
        inner: Vec<SiteConfig>,
        workload: Workload,
        transport: Arc<dyn Transport>,
        template: &AgentConfig,
        work_dir: &Path,
    ) -> Result<Self, SimError> {
        let mut wns = Vec::new();
        for cfg in inner {
            cfg.validate()?;
            let dir: PathBuf = work_dir.join(cfg.site_id.as_str());
            let mut ac = AgentConfig::new(id.clone(), &dir);
            ac.pull_enabled = false;
            ac.relay_enabled = false;
            ac.storage_element = template.storage_element.clone();
            ac.max_transfer_attempts_per_cycle = template.max_transfer_attempts_per_cycle;
            ac.duplicate_registrations = template.duplicate_registrations;
            ac.reschedule_runtime_failures = template.reschedule_runtime_failures;
            let (relay, wn_transport): (Option<Arc<RelayTransport>>, Arc<dyn Transport>) =
                if cfg.wn_outbound_connectivity {
                    (None, transport.clone())
                } else {
                    let r = Arc::new(RelayTransport::new(transport.clone()));
                    (Some(r.clone()), r)
                };
            let agent = Agent::open(ac, wn_transport).map_err(|e| SimError::Setup(e.to_string()))?;
            let site = SimSite::new(cfg, workload.clone()).reporting_as(id.clone());
            wns.push(WorkerNode { site, agent, relay });
        }
        Ok(PortalSite {
            id,
            wns,
            pending: Vec::new(),
            grid_jobs: BTreeMap::new(),
            completed: Vec::new(),
            log: Vec::new(),
            now: Timestamp::ZERO,
            next_grid: 1,
        })
    }

    pub fn id(&self) -> &SiteId {
        &self.id
    }

    pub fn worker_nodes(&self) -> Vec<&SiteId> {
        self.wns.iter().map(|w| w.site.site_id()).collect()
    }

    pub fn grid_jobs_in_flight(&self) -> usize {
        self.grid_jobs.len()
    }

    pub fn is_idle(&self) -> bool {
        self.grid_jobs.is_empty() && self.wns.iter().all(|w| w.agent.is_idle())
    }

    fn record(&mut self, site: SiteId, kind: &str, detail: String) {
        self.log.push((
            site,
            SimEvent {
                time: self.now,
                kind: kind.to_string(),
                detail,
            },
        ));
    }

    fn record_actions(&mut self, wn: usize, actions: Vec<Action>) {
        let site = self.wns[wn].site.site_id().clone();
        for a in actions {
            self.record(site.clone(), a.kind(), a.detail());
        }
    }

    /// Ships a job to the least-loaded worker node (ties broken by node id).
    pub fn portal_submit(&mut self, job_xml: &[u8]) -> Result<String, SubmitError> {
        let job = job_from_xml(job_xml).map_err(|e| SubmitError(format!("bad job description: {e}")))?;
        let wn = (0..self.wns.len())
            .min_by(|&a, &b| {
                let load = |i: usize| {
                    self.wns[i].site.batch_load().total() as usize
                        + self.pending.iter().filter(|s| s.wn == i).count()
                };
                load(a)
                    .cmp(&load(b))
                    .then_with(|| self.wns[a].site.site_id().cmp(self.wns[b].site.site_id()))
            })
            .ok_or_else(|| SubmitError(format!("NoInnerResources: portal {} has no worker nodes", self.id)))?;
        let grid_id = format!("{}.grid{}", self.id, self.next_grid);
        self.next_grid += 1;
        self.grid_jobs.insert(
            grid_id.clone(),
            GridJob {
                job_id: job.job_id.clone(),
                wn,
                dispatched: false,
            },
        );
        self.pending.push(Sandbox {
            grid_id: grid_id.clone(),
            wn,
            job_xml: job_xml.to_vec(),
        });
        let wn_id = self.wns[wn].site.site_id().to_string();
        self.record(self.id.clone(), "portal_submit", format!("job={} grid={grid_id} wn={wn_id}", job.job_id));
        Ok(grid_id)
    }

    /// Advances the sub-grid to `now`: dispatches sandboxes, runs the worker
    /// nodes and their agents, and hands every worker-node status message to
    /// `deliver` in the order it was produced.
    pub fn tick(&mut self, now: Timestamp, deliver: &mut dyn FnMut(StatusMessage, MessagePath)) {
        self.now = now;
        for sandbox in std::mem::take(&mut self.pending) {
            let wn = sandbox.wn;
            self.wns[wn].site.advance(now);
            self.flush_wn_messages(wn, deliver);
            match job_from_xml(&sandbox.job_xml) {
                Ok(job) => {
                    let w = &mut self.wns[wn];
                    let report = w.agent.adopt(&mut w.site, job);
                    self.record_actions(wn, report.actions);
                }
                Err(e) => {
                    let site = self.wns[wn].site.site_id().clone();
                    self.record(site, "error", format!("sandbox {}: {e}", sandbox.grid_id));
                }
            }
            if let Some(g) = self.grid_jobs.get_mut(&sandbox.grid_id) {
                g.dispatched = true;
            }
            self.flush_wn_messages(wn, deliver);
        }
        for wn in 0..self.wns.len() {
            self.wns[wn].site.advance(now);
            self.flush_wn_messages(wn, deliver);
            let w = &mut self.wns[wn];
            let report = w.agent.run_cycle(&mut w.site);
            self.record_actions(wn, report.actions);
            self.flush_wn_messages(wn, deliver);
        }
        let finished: Vec<String> = self
            .grid_jobs
            .iter()
            .filter(|(_, g)| g.dispatched && !self.wns[g.wn].agent.has_job(&g.job_id))
            .map(|(id, _)| id.clone())
            .collect();
        for grid_id in finished {
            let g = self.grid_jobs.remove(&grid_id).expect("listed above");
            self.record(self.id.clone(), "grid_end", format!("job={} grid={grid_id}", g.job_id));
            self.completed.push(Completion {
                batch_id: grid_id,
                job_id: g.job_id,
                outcome: Outcome::Delegated,
                outputs: Vec::new(),
                logs: Vec::new(),
                cpu_seconds: 0.0,
            });
        }
    }

    fn flush_wn_messages(&mut self, wn: usize, deliver: &mut dyn FnMut(StatusMessage, MessagePath)) {
        let w = &mut self.wns[wn];
        for event in w.site.drain_log() {
            self.log.push((w.site.site_id().clone(), event));
        }
        let path = if w.site.config().wn_outbound_connectivity {
            MessagePath::Direct
        } else {
            MessagePath::Relay
        };
        for m in w.site.drain_messages() {
            deliver(m, path);
        }
        if let Some(relay) = &w.relay {
            for m in relay.drain() {
                deliver(m, MessagePath::Relay);
            }
        }
    }

    pub fn drain_log(&mut self) -> Vec<(SiteId, SimEvent)> {
        std::mem::take(&mut self.log)
    }

    pub fn drain_deliveries(&mut self) -> Vec<Delivered> {
        self.wns.iter_mut().flat_map(|w| w.site.drain_deliveries()).collect()
    }
}

impl LocalSite for PortalSite {
    fn now(&self) -> Timestamp {
        self.now
    }

    fn slot_count(&self) -> u32 {
        self.wns.iter().map(|w| w.site.config().slot_count).sum()
    }

    fn cpu_power(&self) -> f64 {
        if self.wns.is_empty() {
            return 0.0;
        }
        self.wns.iter().map(|w| w.site.config().cpu_power).sum::<f64>() / self.wns.len() as f64
    }

    fn free_disk_mb(&self) -> u64 {
        self.wns.iter().map(|w| w.site.free_disk_mb()).sum()
    }

    fn shared_area_writable(&self) -> bool {
        false
    }

    fn installs_remotely(&self) -> bool {
        true
    }

    fn batch_load(&self) -> BatchLoad {
        let queued = self.grid_jobs.values().filter(|g| !g.dispatched).count() as u32;
        BatchLoad {
            queued,
            running: self.grid_jobs.len() as u32 - queued,
        }
    }

    fn submit(&mut self, wrapper: JobWrapper) -> Result<String, SubmitError> {
        let xml = job_to_xml(&wrapper.descriptor).map_err(|e| SubmitError(e.to_string()))?;
        self.portal_submit(&xml)
    }

    fn take_completed(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.completed)
    }

    fn transfer(&mut self, _local_path: &str, _storage_element: &str, lfn: &str) -> Result<Receipt, TransferError> {
        Err(TransferError(format!("portal {} holds no copy of {lfn}", self.id)))
    }

    fn release(&mut self, _local_path: &str) {}
}
