//! Domain types shared by the central services, the agents and the simulator.
//!
//! Everything here is a plain value. The only mutable record, [`JobRecord`],
//! is changed exclusively inside store transactions owned by the services.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since an epoch chosen by the [`Clock`](crate::services::Clock) in use.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_secs(secs: u64) -> Self {
        Timestamp(secs * 1000)
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn plus_millis(self, ms: u64) -> Self {
        Timestamp(self.0.saturating_add(ms))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Identifier of a stored workflow definition.
    WorkflowId
);
string_id!(
    /// Identifier of a production run. Assigned ids sort in creation order.
    RunId
);
string_id!(
    /// Identifier of a job; `<run_id>-<sequence index, zero padded>`.
    JobId
);
string_id!(
    /// Identifier of a production site (or a worker node inside a portal).
    SiteId
);

impl JobId {
    pub fn for_run(run: &RunId, sequence_index: u32) -> Self {
        JobId(format!("{}-{:08}", run.0, sequence_index))
    }
}

/// A `(application, version)` pair naming one software package.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SoftwareRef {
    pub application: String,
    pub app_version: String,
}

impl SoftwareRef {
    pub fn new(application: impl Into<String>, app_version: impl Into<String>) -> Self {
        SoftwareRef {
            application: application.into(),
            app_version: app_version.into(),
        }
    }
}

impl fmt::Display for SoftwareRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.application, self.app_version)
    }
}

/// One application stage of a workflow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDefinition {
    pub application: String,
    pub app_version: String,
    /// Ordered `key=value` options.
    pub options: Vec<(String, String)>,
    pub input_types: BTreeSet<String>,
    pub output_types: BTreeSet<String>,
}

impl StepDefinition {
    pub fn new(application: impl Into<String>, app_version: impl Into<String>) -> Self {
        StepDefinition {
            application: application.into(),
            app_version: app_version.into(),
            options: Vec::new(),
            input_types: BTreeSet::new(),
            output_types: BTreeSet::new(),
        }
    }

    pub fn option(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.options.push((key.into(), value.into()));
        self
    }

    pub fn input(mut self, ty: impl Into<String>) -> Self {
        self.input_types.insert(ty.into());
        self
    }

    pub fn output(mut self, ty: impl Into<String>) -> Self {
        self.output_types.insert(ty.into());
        self
    }

    pub fn software(&self) -> SoftwareRef {
        SoftwareRef::new(&self.application, &self.app_version)
    }

    pub fn option_value(&self, key: &str) -> Option<&str> {
        self.options
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDefinition {
    pub workflow_id: WorkflowId,
    pub name: String,
    pub version: u32,
    pub steps: Vec<StepDefinition>,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("workflow has no steps")]
    Empty,
    /// Index of the offending step.
    #[error("step {0} is malformed or its inputs are not produced by the previous step")]
    InvalidStep(usize),
}

impl WorkflowDefinition {
    /// Checks the step list: every step names an application, a version and at
    /// least one output type, and each step's inputs are a subset of the
    /// previous step's outputs.
    pub fn check_pipeline(&self) -> Result<(), PipelineError> {
        check_steps(&self.steps)
    }
}

pub fn check_steps(steps: &[StepDefinition]) -> Result<(), PipelineError> {
    if steps.is_empty() {
        return Err(PipelineError::Empty);
    }
    for (i, step) in steps.iter().enumerate() {
        if step.application.is_empty() || step.app_version.is_empty() || step.output_types.is_empty() {
            return Err(PipelineError::InvalidStep(i));
        }
        if i > 0 && !step.input_types.is_subset(&steps[i - 1].output_types) {
            return Err(PipelineError::InvalidStep(i));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductionRun {
    pub run_id: RunId,
    pub workflow_id: WorkflowId,
    pub total_events: u64,
    pub events_per_job: u64,
    pub extra_options: BTreeMap<String, String>,
    pub destination_site: Option<SiteId>,
    pub created_at: Timestamp,
}

/// Run option consumed into [`JobRequirements::min_cpu_power`].
pub const OPT_MIN_CPU_POWER: &str = "min_cpu_power";
/// Run option consumed into [`JobRequirements::min_disk_mb`].
pub const OPT_MIN_DISK_MB: &str = "min_disk_mb";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRequirements {
    pub destination_site: Option<SiteId>,
    pub min_cpu_power: f64,
    pub min_disk_mb: u64,
    pub software: Vec<SoftwareRef>,
}

impl JobRequirements {
    pub fn any() -> Self {
        JobRequirements {
            destination_site: None,
            min_cpu_power: 0.0,
            min_disk_mb: 0,
            software: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobDescriptor {
    pub job_id: JobId,
    pub run_id: RunId,
    pub sequence_index: u32,
    pub events: u64,
    pub resolved_steps: Vec<StepDefinition>,
    pub requirements: JobRequirements,
    pub first_event_offset: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobState {
    Created,
    Waiting,
    Assigned,
    Installing,
    Submitted,
    Running,
    Transferring,
    Done,
    Failed,
}

impl JobState {
    pub const ALL: [JobState; 9] = [
        JobState::Created,
        JobState::Waiting,
        JobState::Assigned,
        JobState::Installing,
        JobState::Submitted,
        JobState::Running,
        JobState::Transferring,
        JobState::Done,
        JobState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Created => "Created",
            JobState::Waiting => "Waiting",
            JobState::Assigned => "Assigned",
            JobState::Installing => "Installing",
            JobState::Submitted => "Submitted",
            JobState::Running => "Running",
            JobState::Transferring => "Transferring",
            JobState::Done => "Done",
            JobState::Failed => "Failed",
        }
    }

    /// States in which a site holds the job.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            JobState::Assigned
                | JobState::Installing
                | JobState::Submitted
                | JobState::Running
                | JobState::Transferring
        )
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown job state {0:?}")]
pub struct UnknownState(pub String);

impl FromStr for JobState {
    type Err = UnknownState;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| UnknownState(s.to_string()))
    }
}

/// The job lifecycle. `Failed -> Waiting` is only taken by a reschedule.
pub fn validate_transition(from: JobState, to: JobState) -> bool {
    use JobState::*;
    match (from, to) {
        (Created, Waiting)
        | (Waiting, Assigned)
        | (Assigned, Installing)
        | (Installing, Submitted)
        | (Submitted, Running)
        | (Running, Transferring)
        | (Transferring, Done)
        | (Failed, Waiting) => true,
        (f, Failed) => f.is_active(),
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub timestamp: Timestamp,
    pub state: JobState,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub state: JobState,
    pub site: Option<SiteId>,
    pub batch_id: Option<String>,
    pub attempt: u32,
    pub last_update: Timestamp,
    /// Accepted state transitions only, oldest first.
    pub history: Vec<HistoryEntry>,
    /// Sites whose batch system failed this job; never served to again.
    #[serde(default)]
    pub excluded_sites: BTreeSet<SiteId>,
    /// Normalized CPU consumed by the last execution.
    #[serde(default)]
    pub cpu_seconds: Option<f64>,
    /// Timestamp of the latest agent report in the current attempt.
    #[serde(default)]
    pub last_report: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: JobState,
    pub to: JobState,
}

impl JobRecord {
    pub fn new(job_id: JobId, now: Timestamp) -> Self {
        JobRecord {
            job_id,
            state: JobState::Created,
            site: None,
            batch_id: None,
            attempt: 1,
            last_update: now,
            history: vec![HistoryEntry {
                timestamp: now,
                state: JobState::Created,
                note: String::new(),
            }],
            excluded_sites: BTreeSet::new(),
            cpu_seconds: None,
            last_report: None,
        }
    }

    /// Applies a legal transition. The recorded time never goes backwards.
    pub fn transition(
        &mut self,
        to: JobState,
        at: Timestamp,
        note: impl Into<String>,
    ) -> Result<(), IllegalTransition> {
        if !validate_transition(self.state, to) {
            return Err(IllegalTransition { from: self.state, to });
        }
        let at = at.max(self.last_update);
        self.state = to;
        self.last_update = at;
        self.history.push(HistoryEntry {
            timestamp: at,
            state: to,
            note: note.into(),
        });
        Ok(())
    }
}

/// What an agent advertises when it asks for work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceCapability {
    pub site_id: SiteId,
    pub cpu_power: f64,
    pub free_disk_mb: u64,
    pub queue_occupancy: f64,
    pub installed_software: BTreeSet<SoftwareRef>,
}

impl ResourceCapability {
    pub fn is_valid(&self) -> bool {
        self.cpu_power > 0.0
            && self.cpu_power.is_finite()
            && (0.0..=1.0).contains(&self.queue_occupancy)
            && !self.site_id.0.is_empty()
    }
}

/// Pull-side matching. Software is not a criterion: agents install on demand.
pub fn match_job(req: &JobRequirements, cap: &ResourceCapability) -> bool {
    req.destination_site
        .as_ref()
        .is_none_or(|dest| *dest == cap.site_id)
        && cap.cpu_power >= req.min_cpu_power
        && cap.free_disk_mb >= req.min_disk_mb
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SplitError {
    #[error("run references workflow {run_workflow} but workflow {given} was supplied")]
    MismatchedWorkflow {
        run_workflow: WorkflowId,
        given: WorkflowId,
    },
    #[error("invalid run parameters: {0}")]
    InvalidParameters(String),
}

/// Splits a run into jobs whose event intervals partition `[0, total_events)`.
pub fn split_run(
    run: &ProductionRun,
    workflow: &WorkflowDefinition,
) -> Result<Vec<JobDescriptor>, SplitError> {
    if run.workflow_id != workflow.workflow_id {
        return Err(SplitError::MismatchedWorkflow {
            run_workflow: run.workflow_id.clone(),
            given: workflow.workflow_id.clone(),
        });
    }
    if run.events_per_job == 0 || run.total_events == 0 {
        return Err(SplitError::InvalidParameters(format!(
            "need total_events >= 1 and events_per_job >= 1, got {} and {}",
            run.total_events, run.events_per_job
        )));
    }
    let requirements = requirements_for(run, workflow)?;
    let resolved_steps: Vec<StepDefinition> = workflow
        .steps
        .iter()
        .map(|step| apply_overrides(step, &run.extra_options))
        .collect();

    let job_count = run.total_events.div_ceil(run.events_per_job);
    if job_count > u32::MAX as u64 {
        return Err(SplitError::InvalidParameters(format!("{job_count} jobs is too many")));
    }
    let jobs = (0..job_count)
        .map(|i| {
            let offset = i * run.events_per_job;
            let events = run.events_per_job.min(run.total_events - offset);
            JobDescriptor {
                job_id: JobId::for_run(&run.run_id, i as u32),
                run_id: run.run_id.clone(),
                sequence_index: i as u32,
                events,
                resolved_steps: resolved_steps.clone(),
                requirements: requirements.clone(),
                first_event_offset: offset,
            }
        })
        .collect();
    Ok(jobs)
}

fn apply_overrides(step: &StepDefinition, overrides: &BTreeMap<String, String>) -> StepDefinition {
    let mut step = step.clone();
    for (key, value) in step.options.iter_mut() {
        if let Some(v) = overrides.get(key) {
            *value = v.clone();
        }
    }
    step
}

fn requirements_for(
    run: &ProductionRun,
    workflow: &WorkflowDefinition,
) -> Result<JobRequirements, SplitError> {
    let min_cpu_power = match run.extra_options.get(OPT_MIN_CPU_POWER) {
        Some(v) => v
            .parse::<f64>()
            .ok()
            .filter(|p| p.is_finite() && *p >= 0.0)
            .ok_or_else(|| SplitError::InvalidParameters(format!("{OPT_MIN_CPU_POWER}={v}")))?,
        None => 0.0,
    };
    let min_disk_mb = match run.extra_options.get(OPT_MIN_DISK_MB) {
        Some(v) => v
            .parse::<u64>()
            .map_err(|_| SplitError::InvalidParameters(format!("{OPT_MIN_DISK_MB}={v}")))?,
        None => 0,
    };
    let mut software: Vec<SoftwareRef> = Vec::new();
    for step in &workflow.steps {
        let sw = step.software();
        if !software.contains(&sw) {
            software.push(sw);
        }
    }
    Ok(JobRequirements {
        destination_site: run.destination_site.clone(),
        min_cpu_power,
        min_disk_mb,
        software,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetStatus {
    Pending,
    Approved,
    Rejected,
}

impl DatasetStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetStatus::Pending => "Pending",
            DatasetStatus::Approved => "Approved",
            DatasetStatus::Rejected => "Rejected",
        }
    }
}

impl FromStr for DatasetStatus {
    type Err = UnknownState;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Pending" => Ok(DatasetStatus::Pending),
            "Approved" => Ok(DatasetStatus::Approved),
            "Rejected" => Ok(DatasetStatus::Rejected),
            _ => Err(UnknownState(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescription {
    pub lfn: String,
    pub data_type: String,
    pub job_id: JobId,
    pub run_id: RunId,
    pub events: u64,
    pub size_bytes: u64,
    pub checksum: u32,
    pub status: DatasetStatus,
}

impl DatasetDescription {
    /// True when both describe the same data, ignoring approval status.
    pub fn same_content(&self, other: &DatasetDescription) -> bool {
        self.lfn == other.lfn
            && self.data_type == other.data_type
            && self.job_id == other.job_id
            && self.run_id == other.run_id
            && self.events == other.events
            && self.size_bytes == other.size_bytes
            && self.checksum == other.checksum
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replica {
    pub lfn: String,
    pub storage_element: String,
    pub url: String,
    pub registered_at: Timestamp,
    pub checksum: u32,
}

/// Logical file name of the dataset of `data_type` written by step `step` of a job.
pub fn dataset_lfn(job: &JobDescriptor, step: usize, data_type: &str) -> String {
    format!(
        "/pullgrid/{}/{:08}/s{}.{}",
        job.run_id, job.sequence_index, step, data_type
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_step_workflow() -> WorkflowDefinition {
        WorkflowDefinition {
            workflow_id: WorkflowId::new("wf-1"),
            name: "mc".into(),
            version: 1,
            steps: vec![
                StepDefinition::new("Gauss", "v5")
                    .option("seed", "1")
                    .option("level", "low")
                    .output("sim"),
                StepDefinition::new("Boole", "v3")
                    .option("level", "high")
                    .input("sim")
                    .output("digi"),
            ],
            created_at: Timestamp::ZERO,
        }
    }

    fn run(total: u64, per_job: u64) -> ProductionRun {
        ProductionRun {
            run_id: RunId::new("run-000001"),
            workflow_id: WorkflowId::new("wf-1"),
            total_events: total,
            events_per_job: per_job,
            extra_options: BTreeMap::new(),
            destination_site: None,
            created_at: Timestamp::ZERO,
        }
    }

    #[test]
    fn transition_basics() {
        assert!(validate_transition(JobState::Waiting, JobState::Assigned));
        assert!(!validate_transition(JobState::Done, JobState::Waiting));
    }

    #[test]
    fn transition_table_matches_hand_enumeration() {
        use JobState::*;
        // Hand-enumerated from the lifecycle rules, independent of the match arms.
        let legal: BTreeSet<(JobState, JobState)> = [
            (Created, Waiting),
            (Waiting, Assigned),
            (Assigned, Installing),
            (Installing, Submitted),
            (Submitted, Running),
            (Running, Transferring),
            (Transferring, Done),
            (Assigned, Failed),
            (Installing, Failed),
            (Submitted, Failed),
            (Running, Failed),
            (Transferring, Failed),
            (Failed, Waiting),
        ]
        .into_iter()
        .collect();
        assert_eq!(legal.len(), 13);
        let mut count = 0;
        for from in JobState::ALL {
            for to in JobState::ALL {
                let ok = validate_transition(from, to);
                assert_eq!(ok, legal.contains(&(from, to)), "{from} -> {to}");
                count += ok as usize;
            }
        }
        assert_eq!(count, 13);
        for to in JobState::ALL {
            assert!(!validate_transition(Done, to));
        }
    }

    #[test]
    fn split_exact_division() {
        let jobs = split_run(&run(100, 25), &two_step_workflow()).unwrap();
        assert_eq!(jobs.len(), 4);
        assert!(jobs.iter().all(|j| j.events == 25));
        let offsets: Vec<u64> = jobs.iter().map(|j| j.first_event_offset).collect();
        assert_eq!(offsets, vec![0, 25, 50, 75]);
    }

    #[test]
    fn split_with_remainder() {
        let jobs = split_run(&run(10, 3), &two_step_workflow()).unwrap();
        let events: Vec<u64> = jobs.iter().map(|j| j.events).collect();
        assert_eq!(events, vec![3, 3, 3, 1]);
        assert_eq!(jobs[3].first_event_offset, 9);
    }

    #[test]
    fn split_single_event() {
        let jobs = split_run(&run(1, 500), &two_step_workflow()).unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].events, 1);
        assert_eq!(jobs[0].first_event_offset, 0);
        assert!(matches!(
            split_run(&run(0, 5), &two_step_workflow()),
            Err(SplitError::InvalidParameters(_))
        ));
    }

    #[test]
    fn split_mismatched_workflow() {
        let mut wf = two_step_workflow();
        wf.workflow_id = WorkflowId::new("wf-2");
        assert!(matches!(
            split_run(&run(10, 5), &wf),
            Err(SplitError::MismatchedWorkflow { .. })
        ));
    }

    #[test]
    fn overrides_replace_by_exact_key_only() {
        let mut r = run(10, 5);
        r.extra_options.insert("level".into(), "max".into());
        r.extra_options.insert("lev".into(), "x".into());
        r.extra_options.insert("new_key".into(), "y".into());
        let jobs = split_run(&r, &two_step_workflow()).unwrap();
        let steps = &jobs[0].resolved_steps;
        assert_eq!(
            steps[0].options,
            vec![("seed".to_string(), "1".to_string()), ("level".to_string(), "max".to_string())]
        );
        assert_eq!(steps[1].options, vec![("level".to_string(), "max".to_string())]);
    }

    #[test]
    fn requirements_list_distinct_software_in_step_order() {
        let mut wf = two_step_workflow();
        wf.steps.push(
            StepDefinition::new("Gauss", "v5")
                .input("digi")
                .output("more"),
        );
        let mut r = run(10, 5);
        r.extra_options.insert(OPT_MIN_CPU_POWER.into(), "0.5".into());
        r.extra_options.insert(OPT_MIN_DISK_MB.into(), "200".into());
        r.destination_site = Some(SiteId::new("A"));
        let jobs = split_run(&r, &wf).unwrap();
        let req = &jobs[0].requirements;
        assert_eq!(
            req.software,
            vec![SoftwareRef::new("Gauss", "v5"), SoftwareRef::new("Boole", "v3")]
        );
        assert_eq!(req.min_cpu_power, 0.5);
        assert_eq!(req.min_disk_mb, 200);
        assert_eq!(req.destination_site, Some(SiteId::new("A")));
    }

    #[test]
    fn pipeline_check() {
        let wf = two_step_workflow();
        assert_eq!(wf.check_pipeline(), Ok(()));
        let mut bad = wf.clone();
        bad.steps[1].input_types.insert("raw".into());
        assert_eq!(bad.check_pipeline(), Err(PipelineError::InvalidStep(1)));
        let mut empty = wf;
        empty.steps.clear();
        assert_eq!(empty.check_pipeline(), Err(PipelineError::Empty));
    }

    fn cap(site: &str, cpu: f64, disk: u64) -> ResourceCapability {
        ResourceCapability {
            site_id: SiteId::new(site),
            cpu_power: cpu,
            free_disk_mb: disk,
            queue_occupancy: 0.0,
            installed_software: BTreeSet::new(),
        }
    }

    #[test]
    fn matching_examples() {
        assert!(match_job(&JobRequirements::any(), &cap("X", 0.1, 0)));
        let mut req = JobRequirements::any();
        req.destination_site = Some(SiteId::new("siteA"));
        assert!(!match_job(&req, &cap("siteB", 1.0, 1000)));
        assert!(match_job(&req, &cap("siteA", 1.0, 1000)));
        let req = JobRequirements {
            min_cpu_power: 1.0,
            min_disk_mb: 500,
            ..JobRequirements::any()
        };
        assert!(!match_job(&req, &cap("A", 0.9, 10_000)));
        assert!(match_job(&req, &cap("A", 1.0, 500)));
    }

    #[test]
    fn software_is_not_a_match_criterion() {
        let req = JobRequirements {
            software: vec![SoftwareRef::new("Gauss", "v5")],
            ..JobRequirements::any()
        };
        assert!(match_job(&req, &cap("A", 1.0, 0)));
    }

    #[test]
    fn record_transition_keeps_time_monotone() {
        let mut rec = JobRecord::new(JobId::new("j"), Timestamp(100));
        rec.transition(JobState::Waiting, Timestamp(50), "").unwrap();
        assert_eq!(rec.last_update, Timestamp(100));
        assert!(rec.transition(JobState::Done, Timestamp(200), "").is_err());
        assert_eq!(rec.state, JobState::Waiting);
    }

    proptest! {
        #[test]
        fn split_conserves_events(total in 1u64..5000, per in 1u64..700) {
            let jobs = split_run(&run(total, per), &two_step_workflow()).unwrap();
            prop_assert_eq!(jobs.len() as u64, total.div_ceil(per));
            prop_assert_eq!(jobs.iter().map(|j| j.events).sum::<u64>(), total);
            let mut next = 0;
            for (i, j) in jobs.iter().enumerate() {
                prop_assert_eq!(j.first_event_offset, next);
                prop_assert_eq!(j.sequence_index as usize, i);
                prop_assert!(j.events >= 1);
                if i + 1 < jobs.len() {
                    prop_assert_eq!(j.events, per);
                }
                next += j.events;
            }
            prop_assert_eq!(next, total);
        }

        #[test]
        fn match_is_monotone(
            min_cpu in 0.0f64..4.0, min_disk in 0u64..10_000,
            cpu in 0.01f64..4.0, disk in 0u64..10_000,
            dcpu in 0.0f64..4.0, ddisk in 0u64..10_000,
        ) {
            let req = JobRequirements { min_cpu_power: min_cpu, min_disk_mb: min_disk, ..JobRequirements::any() };
            let before = match_job(&req, &cap("A", cpu, disk));
            let after = match_job(&req, &cap("A", cpu + dcpu, disk + ddisk));
            prop_assert!(!before || after);
        }

        #[test]
        fn random_walks_stay_legal(choices in proptest::collection::vec(0usize..9, 0..40)) {
            let mut rec = JobRecord::new(JobId::new("j"), Timestamp(0));
            for (t, c) in choices.into_iter().enumerate() {
                let _ = rec.transition(JobState::ALL[c], Timestamp(t as u64), "");
            }
            for pair in rec.history.windows(2) {
                prop_assert!(validate_transition(pair[0].state, pair[1].state));
                prop_assert!(pair[0].timestamp <= pair[1].timestamp);
            }
            prop_assert_eq!(rec.history.last().unwrap().state, rec.state);
        }
    }
}
