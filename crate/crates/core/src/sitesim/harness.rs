//! Runs a scenario: central services in-process, one agent per site, all
//! driven from a single thread in virtual time.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::portal::{MessagePath, PortalSite};
use super::scenario::{Scenario, SiteSpec};
use super::site::{Delivered, SimEvent, SimSite};
use super::SimError;
use crate::agent::{Action, Agent, AgentConfig, CycleReport, LocalSite};
use crate::client::{CentralClient, LoopbackTransport};
use crate::model::{JobRecord, JobState, RunId, SiteId, Timestamp, WorkflowDefinition, WorkflowId};
use crate::services::{
    BookkeepingConfig, CreateRun, ManualClock, ProductionConfig, Services, ServicesConfig, StatusMessage,
};
use crate::store::Store;
use crate::swrepo::PackageBuilder;

#[derive(Clone, Debug, Default)]
pub struct SimulationOptions {
    /// Where agents keep their work areas; a temporary directory if unset.
    pub work_dir: Option<PathBuf>,
}

pub enum SimNode {
    Plain(Box<SimSite>),
    Portal(PortalSite),
}

impl SimNode {
    fn local(&mut self) -> &mut dyn LocalSite {
        match self {
            SimNode::Plain(s) => s.as_mut(),
            SimNode::Portal(p) => p,
        }
    }
}

struct Node {
    id: SiteId,
    site: SimNode,
    agent: Agent,
    next_tick: Timestamp,
}

/// End-of-run accounting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Accounting {
    pub sim_time_ms: u64,
    pub jobs_total: u64,
    pub done: u64,
    pub failed: u64,
    pub unfinished: u64,
    pub failed_by_cause: BTreeMap<String, u64>,
    pub attempts: u64,
    pub done_by_site: BTreeMap<String, u64>,
    pub datasets_pending: u64,
    pub datasets_approved: u64,
    pub replicas: u64,
    pub files_stored: u64,
    pub bytes_stored: u64,
}

impl Accounting {
    pub fn success_rate(&self) -> f64 {
        if self.jobs_total == 0 {
            return 0.0;
        }
        self.done as f64 / self.jobs_total as f64
    }
}

fn fmt_duration(ms: u64) -> String {
    let s = ms / 1000;
    format!("{}d {:02}:{:02}:{:02}", s / 86_400, s / 3600 % 24, s / 60 % 60, s % 60)
}

impl fmt::Display for Accounting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "simulated time: {}", fmt_duration(self.sim_time_ms))?;
        writeln!(
            f,
            "jobs: {} total, {} done, {} failed, {} unfinished",
            self.jobs_total, self.done, self.failed, self.unfinished
        )?;
        writeln!(f, "attempts: {}", self.attempts)?;
        let causes: Vec<String> = self.failed_by_cause.iter().map(|(c, n)| format!("{c}={n}")).collect();
        writeln!(f, "failures: {}", if causes.is_empty() { "none".into() } else { causes.join(" ") })?;
        writeln!(
            f,
            "success rate: {:.2}% ({}/{})",
            self.success_rate() * 100.0,
            self.done,
            self.jobs_total
        )?;
        writeln!(
            f,
            "datasets: {} registered ({} pending, {} approved), {} replicas",
            self.datasets_pending + self.datasets_approved,
            self.datasets_pending,
            self.datasets_approved,
            self.replicas
        )?;
        writeln!(f, "stored: {} files, {} bytes", self.files_stored, self.bytes_stored)?;
        writeln!(f, "done by site:")?;
        let width = self.done_by_site.keys().map(String::len).max().unwrap_or(0);
        for (site, n) in &self.done_by_site {
            writeln!(f, "  {site:<width$}  {n}")?;
        }
        Ok(())
    }
}

pub struct Simulation {
    services: Arc<Services>,
    clock: ManualClock,
    transport: Arc<LoopbackTransport>,
    client: CentralClient,
    nodes: Vec<Node>,
    log: Vec<String>,
    storage: BTreeMap<(String, String), Delivered>,
    runs: Vec<RunId>,
    now: Timestamp,
    max_time: Timestamp,
    _tmp: Option<tempfile::TempDir>,
}

impl Simulation {
    pub fn new(scenario: &Scenario, options: SimulationOptions) -> Result<Self, SimError> {
        let (tmp, work_dir) = match options.work_dir {
            Some(d) => (None, d),
            None => {
                let t = tempfile::tempdir()?;
                let p = t.path().to_path_buf();
                (Some(t), p)
            }
        };
        let clock = ManualClock::new(Timestamp::ZERO);
        let config = ServicesConfig {
            production: ProductionConfig {
                max_reschedules: scenario.max_reschedules,
            },
            bookkeeping: BookkeepingConfig {
                auto_approve: scenario.auto_approve,
            },
        };
        let services = Arc::new(Services::new(Arc::new(Store::in_memory()), Arc::new(clock.clone()), config));
        let setup = |e: &dyn fmt::Display| SimError::Setup(e.to_string());
        for (sw, deps) in &scenario.packages {
            let mut b = PackageBuilder::new(sw.application.as_str(), sw.app_version.as_str())
                .file("share/VERSION", format!("{sw}\n"));
            for d in deps {
                b = b.depends_on(d.clone());
            }
            let pkg = b.build().map_err(|e| setup(&e))?;
            services.software.publish(&pkg).map_err(|e| setup(&e))?;
        }
        let mut workflows: BTreeMap<&str, WorkflowId> = BTreeMap::new();
        for (name, steps) in &scenario.workflows {
            let wf = WorkflowDefinition {
                workflow_id: WorkflowId::new(""),
                name: name.clone(),
                version: 1,
                steps: steps.clone(),
                created_at: Timestamp::ZERO,
            };
            let id = services.production.define_workflow(wf).map_err(|e| setup(&e))?;
            workflows.insert(name, id);
        }
        let mut runs = Vec::new();
        for r in &scenario.runs {
            let req = CreateRun {
                workflow_id: workflows[r.workflow.as_str()].clone(),
                total_events: r.total_events,
                events_per_job: r.events_per_job,
                extra_options: r.extra_options.clone(),
                destination_site: r.destination.clone(),
                token: None,
            };
            let (run_id, _) = services.production.create_run(&req).map_err(|e| setup(&e))?;
            runs.push(run_id);
        }
        let transport = Arc::new(LoopbackTransport::new(services.clone()));
        let client = CentralClient::new(transport.clone());
        let poll = scenario.agent.poll_interval_ms;
        let count = scenario.sites.len().max(1) as u64;
        let mut nodes = Vec::new();
        for (i, spec) in scenario.sites.iter().enumerate() {
            let id = spec.config.site_id.clone();
            let agent_config = agent_config(scenario, spec, &work_dir.join("agents").join(id.as_str()));
            let site = match &spec.inner {
                None => SimNode::Plain(Box::new(SimSite::new(spec.config.clone(), scenario.workload.clone()))),
                Some(inner) => SimNode::Portal(PortalSite::new(
                    id.clone(),
                    inner.clone(),
                    scenario.workload.clone(),
                    transport.clone(),
                    &agent_config,
                    &work_dir.join("portals").join(id.as_str()),
                )?),
            };
            let agent = Agent::open(agent_config, transport.clone()).map_err(|e| setup(&e))?;
            nodes.push(Node {
                id,
                site,
                agent,
                next_tick: Timestamp(poll * i as u64 / count),
            });
        }
        Ok(Simulation {
            services,
            clock,
            transport,
            client,
            nodes,
            log: Vec::new(),
            storage: BTreeMap::new(),
            runs,
            now: Timestamp::ZERO,
            max_time: Timestamp(scenario.max_time_ms),
            _tmp: tmp,
        })
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    pub fn transport(&self) -> &Arc<LoopbackTransport> {
        &self.transport
    }

    pub fn runs(&self) -> &[RunId] {
        &self.runs
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    /// The event log so far, one line per event.
    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for l in &self.log {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    /// Files delivered to storage elements, by (storage element, lfn).
    pub fn storage(&self) -> &BTreeMap<(String, String), Delivered> {
        &self.storage
    }

    pub fn node(&self, id: &str) -> Option<&SimNode> {
        self.nodes.iter().find(|n| n.id.as_str() == id).map(|n| &n.site)
    }

    pub fn agent(&self, id: &str) -> Option<&Agent> {
        self.nodes.iter().find(|n| n.id.as_str() == id).map(|n| &n.agent)
    }

    /// True when no work is waiting, queued, running or cached anywhere.
    pub fn is_quiescent(&self) -> bool {
        self.services.production.waiting_count() == 0
            && self.nodes.iter().all(|n| {
                n.agent.is_idle()
                    && match &n.site {
                        SimNode::Plain(_) => true,
                        SimNode::Portal(p) => p.is_idle(),
                    }
            })
    }

    /// Runs one agent tick: the earliest due site advances to the tick time,
    /// its worker-node messages are delivered, then its agent cycles.
    pub fn step(&mut self) -> Option<CycleReport> {
        let i = (0..self.nodes.len()).min_by_key(|&i| (self.nodes[i].next_tick, i))?;
        let t = self.nodes[i].next_tick;
        self.now = t;
        self.clock.set(t);
        let poll = {
            let n = &self.nodes[i];
            n.agent.config().poll_interval_ms
        };
        let Node { id, site, agent, next_tick } = &mut self.nodes[i];
        let log = &mut self.log;
        let client = &self.client;
        match site {
            SimNode::Plain(s) => {
                s.advance(t);
                write_events(log, id, s.drain_log());
                let path = if s.config().wn_outbound_connectivity {
                    MessagePath::Direct
                } else {
                    MessagePath::Relay
                };
                for m in s.drain_messages() {
                    deliver(agent, client, log, id, t, m, path);
                }
            }
            SimNode::Portal(p) => {
                let mut relayed = Vec::new();
                p.tick(t, &mut |m, path| relayed.push((m, path)));
                for (site_id, e) in p.drain_log() {
                    write_events(log, &site_id, vec![e]);
                }
                for (m, path) in relayed {
                    deliver(agent, client, log, id, t, m, path);
                }
            }
        }
        let report = agent.run_cycle(site.local());
        write_actions(log, id, t, &report.actions);
        match site {
            SimNode::Plain(s) => {
                write_events(log, id, s.drain_log());
                for d in s.drain_deliveries() {
                    self.storage.insert((d.storage_element.clone(), d.lfn.clone()), d);
                }
            }
            SimNode::Portal(p) => {
                for (site_id, e) in p.drain_log() {
                    write_events(log, &site_id, vec![e]);
                }
                for d in p.drain_deliveries() {
                    self.storage.insert((d.storage_element.clone(), d.lfn.clone()), d);
                }
            }
        }
        *next_tick = t.plus_millis(poll);
        Some(report)
    }

    /// Steps until quiescent or the time limit.
    pub fn run(&mut self) -> Result<Accounting, SimError> {
        while !self.is_quiescent() && self.now <= self.max_time {
            if self.step().is_none() {
                break;
            }
        }
        self.accounting()
    }

    /// Steps until `t` (inclusive) regardless of quiescence.
    pub fn run_until(&mut self, t: Timestamp) {
        while self.nodes.iter().any(|n| n.next_tick <= t) {
            self.step();
        }
    }

    pub fn jobs(&self) -> Result<Vec<JobRecord>, SimError> {
        let mut all = Vec::new();
        for run in &self.runs {
            all.extend(
                self.services
                    .production
                    .jobs_of_run(run)
                    .map_err(|e| SimError::Setup(e.to_string()))?,
            );
        }
        Ok(all)
    }

    pub fn accounting(&self) -> Result<Accounting, SimError> {
        let jobs = self.jobs()?;
        let counts = self
            .services
            .bookkeeping
            .counts()
            .map_err(|e| SimError::Setup(e.to_string()))?;
        let mut a = Accounting {
            sim_time_ms: self.now.millis(),
            jobs_total: jobs.len() as u64,
            done: 0,
            failed: 0,
            unfinished: 0,
            failed_by_cause: BTreeMap::new(),
            attempts: 0,
            done_by_site: BTreeMap::new(),
            datasets_pending: counts.pending,
            datasets_approved: counts.approved,
            replicas: counts.replicas,
            files_stored: self.storage.len() as u64,
            bytes_stored: self.storage.values().map(|d| d.size_bytes).sum(),
        };
        for j in &jobs {
            a.attempts += j.attempt as u64;
            match j.state {
                JobState::Done => {
                    a.done += 1;
                    let site = j.site.as_ref().map_or("-", |s| s.as_str()).to_string();
                    *a.done_by_site.entry(site).or_insert(0) += 1;
                }
                JobState::Failed => {
                    a.failed += 1;
                    *a.failed_by_cause.entry(failure_cause(j)).or_insert(0) += 1;
                }
                _ => a.unfinished += 1,
            }
        }
        Ok(a)
    }
}

/// First word of the note that put the job in Failed.
pub fn failure_cause(j: &JobRecord) -> String {
    j.history
        .iter()
        .rev()
        .find(|h| h.state == JobState::Failed)
        .map(|h| h.note.split(':').next().unwrap_or("").trim().to_string())
        .filter(|c| !c.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn agent_config(scenario: &Scenario, spec: &SiteSpec, work_dir: &Path) -> AgentConfig {
    let d = &scenario.agent;
    let mut c = AgentConfig::new(spec.config.site_id.clone(), work_dir);
    let slots = match &spec.inner {
        None => spec.config.slot_count,
        Some(inner) => inner.iter().map(|w| w.slot_count).sum::<u32>(),
    };
    c.fill_target = spec.fill_target.or(d.fill_target).unwrap_or(slots).max(1);
    c.occupancy_threshold = spec.occupancy_threshold.unwrap_or(d.occupancy_threshold);
    c.poll_interval_ms = d.poll_interval_ms;
    c.storage_element = d.storage_element.clone();
    c.max_transfer_attempts_per_cycle = d.max_transfer_attempts_per_cycle;
    c.duplicate_registrations = d.duplicate_registrations;
    c.reschedule_runtime_failures = d.reschedule_runtime_failures;
    c.relay_enabled = d.relay_enabled;
    c
}

fn line(t: Timestamp, site: &SiteId, kind: &str, detail: &str) -> String {
    let mut s = String::with_capacity(64 + detail.len());
    let _ = write!(s, "t={t} site={site} kind={kind} detail={detail}");
    s
}

fn write_events(log: &mut Vec<String>, site: &SiteId, events: Vec<SimEvent>) {
    for e in events {
        log.push(line(e.time, site, &e.kind, &e.detail));
    }
}

fn write_actions(log: &mut Vec<String>, site: &SiteId, t: Timestamp, actions: &[Action]) {
    for a in actions {
        log.push(line(t, site, a.kind(), &a.detail()));
    }
}

/// Sends a worker-node status message straight to monitoring, or through
/// the site agent when the node has no outbound connectivity or the direct
/// attempt fails.
fn deliver(
    agent: &mut Agent,
    client: &CentralClient,
    log: &mut Vec<String>,
    site: &SiteId,
    t: Timestamp,
    m: StatusMessage,
    path: MessagePath,
) {
    let state = m.reported_state.as_str();
    let step = m.step_index.map_or("-".to_string(), |s| s.to_string());
    if path == MessagePath::Direct {
        match client.report_status(&m) {
            Ok(()) => {
                let detail = format!("job={} state={state} step={step} path=direct", m.job_id);
                log.push(line(t, site, "wn_status", &detail));
                return;
            }
            Err(e) if !e.is_unreachable() => {
                let detail = format!("job={} state={state} step={step} path=direct rejected: {e}", m.job_id);
                log.push(line(t, site, "wn_status", &detail));
                return;
            }
            Err(_) => {}
        }
    }
    let detail = format!("job={} state={state} step={step} path=relay", m.job_id);
    match agent.relay(&m, t) {
        Ok(action) => {
            log.push(line(t, site, "wn_status", &detail));
            log.push(line(t, site, action.kind(), &action.detail()));
        }
        Err(e) => {
            let detail = format!("job={} state={state} step={step} lost: {e}", m.job_id);
            log.push(line(t, site, "wn_status", &detail));
        }
    }
}
