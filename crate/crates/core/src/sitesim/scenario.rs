//! Line-oriented scenario files.
//!
//! ```text
//! seed 7
//! workload cpu_ms_per_event=60000 bytes_per_event=200000 log_bytes=50000 bandwidth=10000000
//! services max_reschedules=3 auto_approve=false
//! agent poll_interval=10m threshold=0.8 storage_element=CERN-Castor max_transfers=50
//! limit max_time=200d
//! package Gauss v1
//! package Boole v2 dep=Gauss:v1
//! workflow mc Gauss:v1:-:SIM Boole:v2:SIM:DIGI
//! run mc events=2000 per_job=500 opt.seed=12
//! site CERN slots=10 cpu=1.5 app=0.02 site_fail=0.04
//! portal DataGrid fill_target=4
//! wn DataGrid wn1 slots=1 cpu=1.0 shared=false wn_outbound=false
//! ```

use std::collections::{BTreeMap, BTreeSet};

use super::{SimError, SiteConfig, Workload};
use crate::agent::config::duration_ms;
use crate::model::{SiteId, SoftwareRef, StepDefinition};

/// Agent settings shared by every site unless overridden on its line.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentDefaults {
    pub poll_interval_ms: u64,
    pub occupancy_threshold: f64,
    /// `None` means one job per slot.
    pub fill_target: Option<u32>,
    pub storage_element: String,
    pub max_transfer_attempts_per_cycle: u32,
    pub duplicate_registrations: bool,
    pub reschedule_runtime_failures: bool,
    pub relay_enabled: bool,
}

impl Default for AgentDefaults {
    fn default() -> Self {
        AgentDefaults {
            poll_interval_ms: 600_000,
            occupancy_threshold: 1.0,
            fill_target: None,
            storage_element: "CERN-Castor".into(),
            max_transfer_attempts_per_cycle: 200,
            duplicate_registrations: false,
            reschedule_runtime_failures: false,
            relay_enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub workflow: String,
    pub total_events: u64,
    pub events_per_job: u64,
    pub destination: Option<SiteId>,
    pub extra_options: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteSpec {
    pub config: SiteConfig,
    pub fill_target: Option<u32>,
    pub occupancy_threshold: Option<f64>,
    /// Worker nodes when the site is a portal.
    pub inner: Option<Vec<SiteConfig>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub workload: Workload,
    pub max_reschedules: u32,
    pub auto_approve: bool,
    pub agent: AgentDefaults,
    pub max_time_ms: u64,
    pub packages: Vec<(SoftwareRef, Vec<SoftwareRef>)>,
    pub workflows: Vec<(String, Vec<StepDefinition>)>,
    pub runs: Vec<RunSpec>,
    pub sites: Vec<SiteSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 0,
            workload: Workload::default(),
            max_reschedules: 3,
            auto_approve: false,
            agent: AgentDefaults::default(),
            max_time_ms: 365 * 86_400_000,
            packages: Vec::new(),
            workflows: Vec::new(),
            runs: Vec::new(),
            sites: Vec::new(),
        }
    }
}

/// Per-site generator seed derived from the scenario seed.
pub fn site_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Line<'a> {
    no: usize,
    words: Vec<&'a str>,
}

impl<'a> Line<'a> {
    fn err(&self, reason: impl Into<String>) -> SimError {
        SimError::Scenario {
            line: self.no,
            reason: reason.into(),
        }
    }

    fn positional(&self, i: usize, what: &str) -> Result<&'a str, SimError> {
        self.words
            .get(i)
            .copied()
            .filter(|w| !w.contains('='))
            .ok_or_else(|| self.err(format!("{} needs {what}", self.words[0])))
    }

    fn options(&self, from: usize) -> Result<Vec<(&'a str, &'a str)>, SimError> {
        self.words[from..]
            .iter()
            .map(|w| w.split_once('=').ok_or_else(|| self.err(format!("expected key=value, got {w:?}"))))
            .collect()
    }

    fn num<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<T, SimError> {
        v.parse().map_err(|_| self.err(format!("{key}: {v:?} is not a number")))
    }

    fn prob(&self, key: &str, v: &str) -> Result<f64, SimError> {
        let p: f64 = self.num(key, v)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(self.err(format!("{key}: {p} outside [0, 1]")));
        }
        Ok(p)
    }

    fn boolean(&self, key: &str, v: &str) -> Result<bool, SimError> {
        match v {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(self.err(format!("{key}: {v:?} is not a boolean"))),
        }
    }

    fn duration(&self, key: &str, v: &str) -> Result<u64, SimError> {
        if let Some(days) = v.strip_suffix('d') {
            let d: f64 = self.num(key, days)?;
            return Ok((d * 86_400_000.0).round() as u64);
        }
        duration_ms(key, v).map_err(|e| self.err(e.to_string()))
    }
}

fn software(line: &Line, s: &str) -> Result<SoftwareRef, SimError> {
    let (app, ver) = s
        .split_once(':')
        .ok_or_else(|| line.err(format!("expected app:version, got {s:?}")))?;
    Ok(SoftwareRef::new(app, ver))
}

fn types(s: &str) -> BTreeSet<String> {
    if s == "-" || s.is_empty() {
        return BTreeSet::new();
    }
    s.split(',').map(str::to_string).collect()
}

pub fn parse_scenario(text: &str) -> Result<Scenario, SimError> {
    let mut sc = Scenario::default();
    let mut explicit_seeds: BTreeSet<usize> = BTreeSet::new();
    let mut wn_count = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let line = Line { no: i + 1, words };
        match line.words[0] {
            "seed" => sc.seed = line.num("seed", line.positional(1, "a value")?)?,
            "workload" => {
                for (k, v) in line.options(1)? {
                    match k {
                        "cpu_ms_per_event" => sc.workload.cpu_ms_per_event = line.num(k, v)?,
                        "bytes_per_event" => sc.workload.bytes_per_event = line.num(k, v)?,
                        "log_bytes" => sc.workload.log_bytes = line.num(k, v)?,
                        "bandwidth" => sc.workload.bandwidth_bytes_per_s = line.num(k, v)?,
                        _ => return Err(line.err(format!("unknown workload key {k}"))),
                    }
                }
                if sc.workload.cpu_ms_per_event == 0 || sc.workload.bandwidth_bytes_per_s.is_nan() || sc.workload.bandwidth_bytes_per_s <= 0.0 {
                    return Err(line.err("cpu_ms_per_event and bandwidth must be positive"));
                }
            }
            "services" => {
                for (k, v) in line.options(1)? {
                    match k {
                        "max_reschedules" => sc.max_reschedules = line.num(k, v)?,
                        "auto_approve" => sc.auto_approve = line.boolean(k, v)?,
                        _ => return Err(line.err(format!("unknown services key {k}"))),
                    }
                }
            }
            "agent" => {
                let a = &mut sc.agent;
                for (k, v) in line.options(1)? {
                    match k {
                        "poll_interval" => a.poll_interval_ms = line.duration(k, v)?,
                        "threshold" => a.occupancy_threshold = line.prob(k, v)?,
                        "fill_target" => a.fill_target = Some(line.num(k, v)?),
                        "storage_element" => a.storage_element = v.to_string(),
                        "max_transfers" => a.max_transfer_attempts_per_cycle = line.num(k, v)?,
                        "duplicate_registrations" => a.duplicate_registrations = line.boolean(k, v)?,
                        "reschedule_runtime_failures" => a.reschedule_runtime_failures = line.boolean(k, v)?,
                        "relay" => a.relay_enabled = line.boolean(k, v)?,
                        _ => return Err(line.err(format!("unknown agent key {k}"))),
                    }
                }
                if a.poll_interval_ms == 0 {
                    return Err(line.err("poll_interval must be positive"));
                }
            }
            "limit" => {
                for (k, v) in line.options(1)? {
                    match k {
                        "max_time" => sc.max_time_ms = line.duration(k, v)?,
                        _ => return Err(line.err(format!("unknown limit key {k}"))),
                    }
                }
            }
            "package" => {
                let sw = SoftwareRef::new(line.positional(1, "an application")?, line.positional(2, "a version")?);
                let mut deps = Vec::new();
                for (k, v) in line.options(3)? {
                    match k {
                        "dep" => deps.push(software(&line, v)?),
                        _ => return Err(line.err(format!("unknown package key {k}"))),
                    }
                }
                sc.packages.push((sw, deps));
            }
            "workflow" => {
                let name = line.positional(1, "a name")?.to_string();
                let mut steps = Vec::new();
                for token in &line.words[2..] {
                    let parts: Vec<&str> = token.split(':').collect();
                    if parts.len() != 4 {
                        return Err(line.err(format!("step {token:?} is not app:version:inputs:outputs")));
                    }
                    let mut step = StepDefinition::new(parts[0], parts[1]);
                    step.input_types = types(parts[2]);
                    step.output_types = types(parts[3]);
                    steps.push(step);
                }
                if steps.is_empty() {
                    return Err(line.err("workflow has no steps"));
                }
                sc.workflows.push((name, steps));
            }
            "run" => {
                let mut run = RunSpec {
                    workflow: line.positional(1, "a workflow name")?.to_string(),
                    total_events: 0,
                    events_per_job: 0,
                    destination: None,
                    extra_options: BTreeMap::new(),
                };
                for (k, v) in line.options(2)? {
                    match k {
                        "events" => run.total_events = line.num(k, v)?,
                        "per_job" => run.events_per_job = line.num(k, v)?,
                        "dest" => run.destination = Some(SiteId::new(v)),
                        _ => match k.strip_prefix("opt.") {
                            Some(key) => {
                                run.extra_options.insert(key.to_string(), v.to_string());
                            }
                            None => return Err(line.err(format!("unknown run key {k}"))),
                        },
                    }
                }
                if !sc.workflows.iter().any(|(n, _)| *n == run.workflow) {
                    return Err(line.err(format!("run of undeclared workflow {}", run.workflow)));
                }
                sc.runs.push(run);
            }
            "site" | "portal" => {
                let id = line.positional(1, "an id")?;
                if sc.sites.iter().any(|s| s.config.site_id.as_str() == id) {
                    return Err(line.err(format!("duplicate site {id}")));
                }
                let mut spec = SiteSpec {
                    config: SiteConfig::new(id, 1, 1.0),
                    fill_target: None,
                    occupancy_threshold: None,
                    inner: (line.words[0] == "portal").then(Vec::new),
                };
                let extra = site_options(&line, &mut spec.config, &line.options(2)?, true)?;
                spec.fill_target = extra.fill_target;
                spec.occupancy_threshold = extra.threshold;
                if extra.seeded {
                    explicit_seeds.insert(sc.sites.len());
                }
                sc.sites.push(spec);
            }
            "wn" => {
                let portal = line.positional(1, "a portal id")?;
                let id = line.positional(2, "a worker node id")?;
                let mut cfg = SiteConfig::new(format!("{portal}-{id}"), 1, 1.0);
                cfg.failure_policy.rng_seed = site_seed(sc.seed, 10_000 + wn_count);
                wn_count += 1;
                site_options(&line, &mut cfg, &line.options(3)?, false)?;
                let spec = sc
                    .sites
                    .iter_mut()
                    .find(|s| s.config.site_id.as_str() == portal)
                    .ok_or_else(|| line.err(format!("wn for undeclared portal {portal}")))?;
                let inner = spec
                    .inner
                    .as_mut()
                    .ok_or_else(|| line.err(format!("{portal} is not a portal")))?;
                inner.push(cfg);
            }
            other => return Err(line.err(format!("unknown directive {other}"))),
        }
    }
    for (i, s) in sc.sites.iter_mut().enumerate() {
        if !explicit_seeds.contains(&i) {
            s.config.failure_policy.rng_seed = site_seed(sc.seed, i);
        }
        s.config
            .validate()
            .map_err(|e| SimError::Scenario { line: 0, reason: e.to_string() })?;
    }
    Ok(sc)
}

#[derive(Default)]
struct SiteExtras {
    seeded: bool,
    fill_target: Option<u32>,
    threshold: Option<f64>,
}

/// Applies site keys to `cfg`; agent keys are accepted only when
/// `agent_keys` is set.
fn site_options(line: &Line, cfg: &mut SiteConfig, opts: &[(&str, &str)], agent_keys: bool) -> Result<SiteExtras, SimError> {
    let mut extra = SiteExtras::default();
    for &(k, v) in opts {
        let p = &mut cfg.failure_policy;
        match k {
            "slots" => cfg.slot_count = line.num(k, v)?,
            "cpu" => cfg.cpu_power = line.num(k, v)?,
            "disk_mb" => cfg.disk_quota_mb = line.num(k, v)?,
            "shared" => cfg.shared_area_writable = line.boolean(k, v)?,
            "wn_outbound" => cfg.wn_outbound_connectivity = line.boolean(k, v)?,
            "app" => p.app_failure_prob = line.prob(k, v)?,
            "site_fail" => p.site_failure_prob = line.prob(k, v)?,
            "transfer_loss" => p.transfer_loss_prob = line.prob(k, v)?,
            "transfer" => p.transfer_failure_prob = line.prob(k, v)?,
            "submit" => p.submission_failure_prob = line.prob(k, v)?,
            "hazard" => p.site_failure_per_hour = line.num(k, v)?,
            "seed" => {
                p.rng_seed = line.num(k, v)?;
                extra.seeded = true;
            }
            "fill_target" if agent_keys => extra.fill_target = Some(line.num(k, v)?),
            "threshold" if agent_keys => extra.threshold = Some(line.prob(k, v)?),
            _ => return Err(line.err(format!("unknown site key {k}"))),
        }
    }
    cfg.validate().map_err(|e| line.err(e.to_string()))?;
    Ok(extra)
}
