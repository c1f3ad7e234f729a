mod common;

use std::collections::BTreeMap;

use common::{Central, ScriptedSite};
use proptest::prelude::*;
use pullgrid::agent::{Action, Agent, AgentConfig, AgentError, CycleReport, Delivery, Outcome};
use pullgrid::model::{JobState, SoftwareRef, StepDefinition, Timestamp};
use pullgrid::services::{ServiceKind, StatusMessage};
use pullgrid::swrepo::InstallOutcome;
use rand::SeedableRng;

fn software(r: &CycleReport) -> Vec<(String, InstallOutcome)> {
    r.actions
        .iter()
        .filter_map(|a| match a {
            Action::Software { software, outcome, .. } => Some((software.to_string(), *outcome)),
            _ => None,
        })
        .collect()
}

fn reported(r: &CycleReport) -> Vec<JobState> {
    r.actions
        .iter()
        .filter_map(|a| match a {
            Action::Reported { state, .. } => Some(*state),
            _ => None,
        })
        .collect()
}

#[test]
fn empty_site_pulls_the_waiting_job() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);

    let r = agent.run_cycle(&mut site);
    assert_eq!(r.pulled().len(), 1);
    assert_eq!(r.count("submit"), 1);
    assert_eq!(software(&r), vec![("Gauss/v1".to_string(), InstallOutcome::Installed)]);
    assert_eq!(reported(&r), vec![JobState::Installing, JobState::Submitted]);
    assert_eq!(r.count("no_work"), 1);
    let job = &site.job_ids()[0];
    assert_eq!(c.state(job), JobState::Submitted);
    let history: Vec<JobState> = c.services.monitoring.job_history(job).unwrap().iter().map(|e| e.state).collect();
    assert!(history.ends_with(&[JobState::Assigned, JobState::Installing, JobState::Submitted]), "{history:?}");
    assert!(r.errors().next().is_none());
}

#[test]
fn occupancy_at_threshold_blocks_pulls() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(3);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = AgentConfig::new("CERN", dir.path().join("a"));
    cfg.occupancy_threshold = 0.8;
    let mut agent = c.agent_with(cfg);
    let mut site = ScriptedSite::new(10);
    site.queued = 9;

    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("pull_gated"), 1);
    assert_eq!(c.calls(ServiceKind::Production, "requestJob"), 0);

    site.queued = 7;
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.pulled().len(), 1);
    assert_eq!(c.calls(ServiceKind::Production, "requestJob"), 1);
}

#[test]
fn fill_target_caps_local_jobs() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(10);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = AgentConfig::new("CERN", dir.path().join("a"));
    cfg.fill_target = 3;
    cfg.occupancy_threshold = 1.0;
    let mut agent = c.agent_with(cfg);
    let mut site = ScriptedSite::new(100);
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.pulled().len(), 3);
    assert_eq!(site.running(), 3);
    let batches: std::collections::BTreeSet<_> = site.submitted.iter().map(|(b, _)| b.clone()).collect();
    assert_eq!(batches.len(), 3);
}

#[test]
fn finalization_runs_while_production_is_down() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(2);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    agent.run_cycle(&mut site);
    let jobs = site.job_ids();
    assert_eq!(jobs.len(), 2);

    site.complete_all(Outcome::Success);
    c.transport.set_online(ServiceKind::Production, false);
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("completed"), 2);
    assert_eq!(r.count("job_done"), 2);
    assert_eq!(r.count("pull_skipped"), 1);
    for j in &jobs {
        assert_eq!(c.state(j), JobState::Done);
    }
}

#[test]
fn software_cached_then_fetched_once_then_unavailable() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.publish("Boole", "v2", &[SoftwareRef::new("Gauss", "v1")]);
    let wf = c.workflow(vec![
        StepDefinition::new("Gauss", "v1").output("SIM"),
        StepDefinition::new("Boole", "v2").input("SIM").output("DIGI"),
    ]);
    c.run(&wf, 1);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = AgentConfig::new("CERN", dir.path().join("a"));
    cfg.fill_target = 1;
    let mut agent = c.agent_with(cfg);
    let mut site = ScriptedSite::new(10);

    let r = agent.run_cycle(&mut site);
    assert_eq!(
        software(&r),
        vec![
            ("Gauss/v1".into(), InstallOutcome::Installed),
            ("Gauss/v1".into(), InstallOutcome::Cached),
            ("Boole/v2".into(), InstallOutcome::Installed)
        ]
    );
    assert_eq!(c.calls(ServiceKind::Software, "fetchPackage"), 2);
    site.complete_all(Outcome::Success);
    agent.run_cycle(&mut site);

    c.run(&wf, 1);
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.pulled().len(), 1);
    assert!(software(&r).iter().all(|(_, o)| *o == InstallOutcome::Cached));
    assert_eq!(c.calls(ServiceKind::Software, "fetchPackage"), 2);
    site.complete_all(Outcome::Success);
    agent.run_cycle(&mut site);

    c.publish("Brunel", "v3", &[]);
    let wf2 = c.workflow(vec![
        StepDefinition::new("Gauss", "v1").output("SIM"),
        StepDefinition::new("Brunel", "v3").input("SIM").output("DST"),
    ]);
    c.run(&wf2, 1);
    let r = agent.run_cycle(&mut site);
    let sw = software(&r);
    assert_eq!(sw.iter().filter(|(_, o)| *o == InstallOutcome::Installed).count(), 1);
    assert_eq!(c.calls(ServiceKind::Software, "fetchPackage"), 3);
    site.complete_all(Outcome::Success);
    agent.run_cycle(&mut site);

    c.publish("DaVinci", "v1", &[]);
    let wf3 = c.workflow(vec![StepDefinition::new("DaVinci", "v1").output("NTUP")]);
    let run = c.run(&wf3, 1);
    c.transport.set_online(ServiceKind::Software, false);
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("software_unavailable"), 1);
    assert_eq!(r.count("submit"), 0);
    assert_eq!(c.calls(ServiceKind::Production, "rescheduleJob"), 1);
    let job = &c.services.production.jobs_of_run(&run).unwrap()[0];
    assert_eq!(job.state, JobState::Waiting);
    assert!(job.history.iter().any(|h| h.state == JobState::Failed && h.note.starts_with("software_unavailable")));
}

#[test]
fn refused_submission_is_rescheduled_once() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("A", dir.path());
    let mut site = ScriptedSite::new(10);
    site.refuse_submit = true;

    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("submit_failed"), 1);
    assert_eq!(c.calls(ServiceKind::Production, "rescheduleJob"), 1);
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("no_work"), 1, "excluded site must not get the job back");
    assert_eq!(c.calls(ServiceKind::Production, "rescheduleJob"), 1);
    assert_eq!(c.services.production.waiting_count(), 1);
}

#[test]
fn first_try_transfers_finish_in_the_same_cycle() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    site.with_logs = true;
    agent.run_cycle(&mut site);
    let job = site.job_ids()[0].clone();
    site.complete_all(Outcome::Success);

    let r = agent.run_cycle(&mut site);
    assert_eq!(reported(&r)[..3], [JobState::Running, JobState::Transferring, JobState::Done]);
    assert_eq!(r.count("replica_added"), 1);
    assert_eq!(r.count("log_delivered"), 1);
    assert!(agent.outbox().is_empty());
    assert_eq!(c.state(&job), JobState::Done);
    assert_eq!(site.files.len(), 1, "log stays on local disk");
}

#[test]
fn fail_fail_ok_finishes_on_the_third_cycle() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = AgentConfig::new("CERN", dir.path().join("a"));
    cfg.fill_target = 1;
    let mut agent = c.agent_with(cfg);
    let mut site = ScriptedSite::new(10);
    agent.run_cycle(&mut site);
    let job = site.job_ids()[0].clone();
    site.complete_all(Outcome::Success);
    site.transfer_script.extend([false, false, true]);

    let r1 = agent.run_cycle(&mut site);
    assert_eq!(r1.count("transfer_failed"), 1);
    assert_eq!(c.state(&job), JobState::Transferring);
    let r2 = agent.run_cycle(&mut site);
    assert_eq!(r2.count("transfer_failed"), 1);
    assert_eq!(c.state(&job), JobState::Transferring);
    let r3 = agent.run_cycle(&mut site);
    assert_eq!(r3.count("replica_added"), 1);
    assert_eq!(r3.count("job_done"), 1);
    assert_eq!(c.state(&job), JobState::Done);
    assert!(agent.outbox().is_empty());
}

#[test]
fn zero_output_job_is_done_with_a_warning() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    site.outputs_per_job = 0;
    agent.run_cycle(&mut site);
    let job = site.job_ids()[0].clone();
    site.complete_all(Outcome::Success);
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("job_done"), 1);
    let rec = c.services.production.job(&job).unwrap();
    assert_eq!(rec.state, JobState::Done);
    assert!(rec.history.last().unwrap().note.contains("warning"));
}

#[test]
fn runtime_failures_report_their_cause() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(3);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    agent.run_cycle(&mut site);
    let jobs = site.job_ids();
    let batches: Vec<_> = std::mem::take(&mut site.submitted);
    for ((batch, w), outcome) in batches.into_iter().zip([Outcome::AppFailure, Outcome::SiteFailure, Outcome::TransferLoss]) {
        site.submitted.push((batch, w));
        site.complete_all(outcome);
    }
    agent.run_cycle(&mut site);
    let notes: Vec<String> = jobs
        .iter()
        .map(|j| {
            let rec = c.services.production.job(j).unwrap();
            assert_eq!(rec.state, JobState::Failed);
            rec.history.last().unwrap().note.clone()
        })
        .collect();
    assert!(notes[0].starts_with("app_failure"));
    assert!(notes[1].starts_with("site_failure"));
    assert!(notes[2].starts_with("transfer_failure"));
    assert_eq!(c.calls(ServiceKind::Production, "rescheduleJob"), 0);
    assert!(agent.is_idle());
}

#[test]
fn empty_outbox_flush_is_a_no_op() {
    let c = Central::new();
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    let r = agent.run_cycle(&mut site);
    assert!(site.transfers.is_empty());
    assert_eq!(r.actions, vec![Action::NoWork]);
}

#[test]
fn three_entries_all_delivered() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    site.outputs_per_job = 3;
    agent.run_cycle(&mut site);
    site.complete_all(Outcome::Success);
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("replica_added"), 3);
    assert!(agent.outbox().is_empty());
    assert_eq!(c.services.bookkeeping.counts().unwrap().replicas, 3);
}

#[test]
fn half_failing_transfers_eventually_deliver_everything() {
    const N: usize = 200;
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = AgentConfig::new("CERN", dir.path().join("a"));
    cfg.max_transfer_attempts_per_cycle = 1000;
    let mut agent = c.agent_with(cfg);
    let mut site = ScriptedSite::new(10);
    site.outputs_per_job = N;
    site.transfer_fail_rng = Some((rand_chacha::ChaCha8Rng::seed_from_u64(7), 0.5));
    agent.run_cycle(&mut site);
    let job = site.job_ids()[0].clone();
    site.complete_all(Outcome::Success);

    let mut cycles = 0;
    while cycles == 0 || !agent.outbox().is_empty() {
        agent.run_cycle(&mut site);
        cycles += 1;
        assert!(cycles < 100, "outbox never drained");
    }
    assert_eq!(c.state(&job), JobState::Done);
    assert_eq!(c.services.bookkeeping.counts().unwrap().replicas, N as u64);
    // Attempts per entry are geometric with p = 0.5: mean 2, variance 2.
    let mean = site.transfers.len() as f64 / N as f64;
    let sigma = (2.0 / N as f64).sqrt();
    assert!((mean - 2.0).abs() <= 3.0 * sigma, "mean attempts {mean}");
}

#[test]
fn outbox_survives_restart() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = AgentConfig::new("CERN", dir.path().join("a"));
    let mut site = ScriptedSite::new(10);
    site.outputs_per_job = 2;
    site.with_logs = true;
    let job;
    {
        let mut agent = c.agent_with(cfg.clone());
        agent.run_cycle(&mut site);
        job = site.job_ids()[0].clone();
        site.complete_all(Outcome::Success);
        site.transfer_script.extend([false; 3]);
        agent.run_cycle(&mut site);
        assert_eq!(agent.outbox().len(), 3);
        assert!(matches!(Agent::open(cfg.clone(), c.transport.clone()), Err(AgentError::Locked(_))));
    }
    let mut agent = c.agent_with(cfg);
    assert_eq!(agent.outbox().len(), 3);
    assert!(agent.has_job(&job));
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("replica_added"), 2);
    assert_eq!(c.state(&job), JobState::Done);
    assert!(agent.is_idle());
}

#[test]
fn bookkeeping_outage_defers_replicas_until_registration_lands() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    agent.run_cycle(&mut site);
    let job = site.job_ids()[0].clone();
    site.complete_all(Outcome::Success);
    c.transport.set_online(ServiceKind::Bookkeeping, false);
    let r = agent.run_cycle(&mut site);
    assert!(r.actions.iter().any(|a| matches!(a, Action::Registered { delivery: Delivery::Spooled, .. })));
    assert_eq!(r.count("transfer_verified"), 1);
    assert_eq!(c.state(&job), JobState::Transferring);

    c.transport.set_online(ServiceKind::Bookkeeping, true);
    let r = agent.run_cycle(&mut site);
    let kinds: Vec<&str> = r.actions.iter().map(|a| a.kind()).collect();
    let reg = kinds.iter().position(|k| *k == "metadata_delivered").unwrap();
    let rep = kinds.iter().position(|k| *k == "replica_added").unwrap();
    assert!(reg < rep);
    assert_eq!(site.transfers.len(), 1, "no retransfer after verification");
    assert_eq!(c.state(&job), JobState::Done);
}

fn wn_message(job: &pullgrid::model::JobId, at: u64) -> StatusMessage {
    StatusMessage {
        job_id: job.clone(),
        reported_state: JobState::Running,
        step_index: Some(0),
        note: "step 0 Gauss".into(),
        site_id: "CERN".into(),
        timestamp: Timestamp::from_secs(at),
        cpu_seconds: None,
    }
}

#[test]
fn relay_forwards_and_spools() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    agent.run_cycle(&mut site);
    let job = site.job_ids()[0].clone();

    c.transport.set_online(ServiceKind::Monitoring, false);
    let a = agent.relay(&wn_message(&job, 42), site.now).unwrap();
    assert!(matches!(a, Action::Relayed { delivery: Delivery::Spooled, .. }));
    assert_eq!(c.state(&job), JobState::Submitted);

    c.transport.set_online(ServiceKind::Monitoring, true);
    let r = agent.run_cycle(&mut site);
    assert_eq!(r.count("metadata_delivered"), 1);
    assert_eq!(c.state(&job), JobState::Running);
    let last = c.services.monitoring.job_history(&job).unwrap().pop().unwrap();
    assert_eq!(last.timestamp, Timestamp::from_secs(42));

    let a = agent.relay(&wn_message(&job, 43), site.now).unwrap();
    assert!(matches!(a, Action::Relayed { delivery: Delivery::Direct, .. }));

    let mut cfg = AgentConfig::new("X", dir.path().join("x"));
    cfg.relay_enabled = false;
    let mut plain = c.agent_with(cfg);
    assert!(matches!(plain.relay(&wn_message(&job, 44), site.now), Err(AgentError::RelayDisabled)));
}

#[test]
fn spooled_reports_keep_their_order() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    c.simple_run(1);
    let dir = tempfile::tempdir().unwrap();
    let mut agent = c.agent("CERN", dir.path());
    let mut site = ScriptedSite::new(10);
    c.transport.set_online(ServiceKind::Monitoring, false);
    agent.run_cycle(&mut site);
    let job = site.job_ids()[0].clone();
    site.complete_all(Outcome::Success);
    agent.run_cycle(&mut site);
    assert_eq!(c.state(&job), JobState::Assigned);
    c.transport.set_online(ServiceKind::Monitoring, true);
    agent.run_cycle(&mut site);
    assert_eq!(c.state(&job), JobState::Done);
    let states: Vec<JobState> = c
        .services
        .monitoring
        .job_history(&job)
        .unwrap()
        .iter()
        .filter(|e| !e.illegal_transition)
        .map(|e| e.state)
        .collect();
    assert!(states.ends_with(&[
        JobState::Installing,
        JobState::Submitted,
        JobState::Running,
        JobState::Transferring,
        JobState::Done
    ]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn replicas_follow_verified_transfers(script in proptest::collection::vec(any::<bool>(), 0..40), outputs in 1usize..5, jobs in 1u32..4) {
        let c = Central::new();
        c.publish("Gauss", "v1", &[]);
        c.simple_run(jobs);
        let dir = tempfile::tempdir().unwrap();
        let mut agent = c.agent("CERN", dir.path());
        let mut site = ScriptedSite::new(10);
        site.outputs_per_job = outputs;
        site.transfer_script.extend(script);
        let mut trace = Vec::new();
        trace.extend(agent.run_cycle(&mut site).actions);
        site.complete_all(Outcome::Success);
        for _ in 0..50 {
            trace.extend(agent.run_cycle(&mut site).actions);
            if agent.is_idle() {
                break;
            }
        }
        prop_assert!(agent.is_idle());
        let mut verified = std::collections::BTreeSet::new();
        let mut replicas = 0;
        for a in &trace {
            match a {
                Action::TransferVerified { lfn, .. } => {
                    verified.insert(lfn.clone());
                }
                Action::ReplicaAdded { lfn, .. } => {
                    prop_assert!(verified.contains(lfn), "replica of {} before its transfer", lfn);
                    replicas += 1;
                }
                _ => {}
            }
        }
        prop_assert_eq!(replicas, outputs * jobs as usize);
    }

    #[test]
    fn gated_cycles_never_request_work(queued in 0u32..20, slots in 1u32..12, threshold in 0.1f64..1.0, fill in 1u32..12) {
        let c = Central::new();
        c.publish("Gauss", "v1", &[]);
        c.simple_run(30);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = AgentConfig::new("CERN", dir.path().join("a"));
        cfg.occupancy_threshold = threshold;
        cfg.fill_target = fill;
        let mut agent = c.agent_with(cfg);
        let mut site = ScriptedSite::new(slots);
        site.queued = queued;
        let before = c.calls(ServiceKind::Production, "requestJob");
        let r = agent.run_cycle(&mut site);
        let occupancy = (queued as f64 / slots as f64).min(1.0);
        let gated = occupancy >= threshold || queued >= fill;
        if gated {
            prop_assert_eq!(c.calls(ServiceKind::Production, "requestJob"), before);
        }
        let load = site.queued + site.running() as u32;
        prop_assert!(load <= queued.max(fill));
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in &r.actions {
            *counts.entry(a.kind()).or_default() += 1;
        }
        prop_assert_eq!(counts.get("pull").copied().unwrap_or(0), site.running());
    }
}
