mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{Central, ScriptedSite};
use pullgrid::agent::{AgentConfig, Outcome};
use pullgrid::client::{CentralClient, Endpoints, HttpTransport};
use pullgrid::model::{JobState, SiteId};
use pullgrid::services::http::HttpServer;
use pullgrid::services::ServiceKind;
use pullgrid::sitesim::{parse_scenario, Accounting, Simulation, SimulationOptions};

fn simulate(text: &str) -> (Simulation, Accounting) {
    let sc = parse_scenario(text).unwrap();
    let mut sim = Simulation::new(&sc, SimulationOptions::default()).unwrap();
    let acc = sim.run().unwrap();
    (sim, acc)
}

fn scenario(jobs: u64, sites: &str) -> String {
    scenario_with(60_000, jobs, sites)
}

fn scenario_with(cpu_ms_per_event: u64, jobs: u64, sites: &str) -> String {
    format!(
        "seed 3
workload cpu_ms_per_event={cpu_ms_per_event} bytes_per_event=1000 log_bytes=100 bandwidth=100000000
agent poll_interval=10m
package Gauss v1
workflow mc Gauss:v1:-:SIM
run mc events={} per_job=100
{sites}",
        jobs * 100
    )
}

#[test]
fn no_finished_jobs_means_no_shares() {
    let c = Central::new();
    assert!(c.services.monitoring.site_summary().unwrap().is_empty());
    let (sim, _) = simulate(&scenario(2, "site A slots=2 cpu=1.0 app=1\n"));
    let summary = sim.services().monitoring.site_summary().unwrap();
    assert!(summary.values().all(|s| s.cpu_share == 0.0 && s.done == 0));
}

#[test]
fn single_site_takes_the_whole_share() {
    let (sim, acc) = simulate(&scenario(10, "site A slots=3 cpu=1.0\n"));
    assert_eq!(acc.done, 10);
    let summary = sim.services().monitoring.site_summary().unwrap();
    assert_eq!(summary[&SiteId::new("A")].cpu_share, 1.0);
}

#[test]
fn equal_sites_split_the_cpu() {
    let (sim, acc) = simulate(&scenario(100, "site A slots=5 cpu=1.0\nsite B slots=5 cpu=1.0\n"));
    assert_eq!(acc.done, 100);
    let summary = sim.services().monitoring.site_summary().unwrap();
    let total: f64 = summary.values().map(|s| s.cpu_share).sum();
    assert!((total - 1.0).abs() < 1e-9);
    for s in summary.values() {
        assert!((s.cpu_share - 0.5).abs() <= 0.05, "{summary:?}");
    }
}

/// Holds while job runtime dwarfs the poll interval (here 250 min vs 10 min
/// on the fastest site).
#[test]
fn completed_share_tracks_cpu_ratio() {
    for r in [1.0, 2.0, 4.0] {
        let (_, acc) = simulate(&scenario_with(600_000, 300, &format!("site F slots=4 cpu={r}\nsite S slots=4 cpu=1.0\n")));
        assert_eq!(acc.done + acc.failed, 300);
        let ratio = acc.done_by_site["F"] as f64 / acc.done_by_site["S"] as f64;
        assert!((ratio - r).abs() <= 0.1 * r, "r={r} observed {ratio}");
    }
}

#[test]
fn failures_conserve_the_job_count() {
    let (sim, acc) = simulate(&scenario(
        200,
        "site A slots=5 cpu=1.0 app=0.1 site_fail=0.1\nsite B slots=5 cpu=2.0 transfer_loss=0.1 transfer=0.2\n",
    ));
    assert_eq!(acc.done + acc.failed, 200);
    assert_eq!(acc.unfinished, 0);
    assert!(sim.is_quiescent());
    let by_cause: u64 = acc.failed_by_cause.values().sum();
    assert_eq!(by_cause, acc.failed);
}

#[test]
fn connected_worker_nodes_report_directly() {
    let (sim, acc) = simulate(&scenario(4, "portal P\nwn P n1 slots=1 cpu=1.0 wn_outbound=true\n"));
    assert_eq!(acc.done, 4);
    let wn: Vec<&String> = sim.log().iter().filter(|l| l.contains("kind=wn_status")).collect();
    assert!(!wn.is_empty());
    assert!(wn.iter().all(|l| l.contains("path=direct")), "{wn:?}");
}

#[test]
fn agent_runs_a_job_over_http() {
    let c = Central::new();
    c.publish("Gauss", "v1", &[]);
    let run = c.simple_run(2);
    let server = HttpServer::start(c.services.clone(), "127.0.0.1:0", 2).unwrap();
    let transport = Arc::new(HttpTransport::new(Endpoints::single(&server.url()), Duration::from_secs(5)));
    let dir = tempfile::tempdir().unwrap();
    let mut agent = pullgrid::agent::Agent::open(AgentConfig::new("CERN", dir.path().join("a")), transport.clone()).unwrap();
    let mut site = ScriptedSite::new(4);

    let r = agent.run_cycle(&mut site);
    assert_eq!(r.pulled().len(), 2);
    site.complete_all(Outcome::Success);
    let r = agent.run_cycle(&mut site);
    assert!(r.errors().next().is_none(), "{:?}", r.actions);
    assert_eq!(c.services.production.run_status(&run).unwrap()[&JobState::Done], 2);
    assert!(agent.outbox().is_empty());

    let client = CentralClient::new(transport);
    assert_eq!(client.run_status(&run).unwrap()[&JobState::Done], 2);
    assert_eq!(client.site_summary().unwrap()[&SiteId::new("CERN")].done, 2);
    server.shutdown();
    let err = client.run_status(&run).unwrap_err();
    assert!(err.is_unreachable(), "{err:?}");
    assert_eq!(c.calls(ServiceKind::Production, "requestJob"), 0);
}
