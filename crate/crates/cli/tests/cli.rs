use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use pullgrid::model::{DatasetDescription, DatasetStatus, JobId, RunId, Timestamp};
use pullgrid::services::http::HttpServer;
use pullgrid::services::{DatasetQuery, ManualClock, Services, ServicesConfig};
use pullgrid::store::Store;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Server {
    services: Arc<Services>,
    http: Option<HttpServer>,
    url: String,
}

impl Server {
    fn start() -> Self {
        let services = Arc::new(Services::new(
            Arc::new(Store::in_memory()),
            Arc::new(ManualClock::new(Timestamp::from_secs(1))),
            ServicesConfig::default(),
        ));
        let http = HttpServer::start(services.clone(), "127.0.0.1:0", 2).unwrap();
        let url = http.url();
        Server {
            services,
            http: Some(http),
            url,
        }
    }

    fn cli(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pullgrid"))
            .args(args)
            .env("PULLGRID_URL", &self.url)
            .env_remove("PULLGRID_FORMAT")
            .output()
            .unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(h) = self.http.take() {
            h.shutdown();
        }
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workflow(s: &Server) -> String {
    let xml = repo().join("scenarios/dc04.workflow.xml");
    let o = s.cli(&["workflow", "add", xml.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o).trim().to_string()
}

#[test]
fn run_create_on_missing_workflow_exits_one() {
    let s = Server::start();
    let o = s.cli(&["run", "create", "--workflow", "wf-missing", "--events", "10", "--per-job", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("UnknownWorkflow"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    let s = Server::start();
    assert_eq!(s.cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(s.cli(&["run", "create", "--events", "10"]).status.code(), Some(2));
    assert_eq!(s.cli(&["dataset", "approve"]).status.code(), Some(2));
    assert_eq!(s.cli(&["dataset", "approve", "/a", "--run", "r"]).status.code(), Some(2));
    assert_eq!(s.cli(&["dataset", "query", "--status", "Lost"]).status.code(), Some(2));
    assert_eq!(s.cli(&["package", "publish", "Gauss", "."]).status.code(), Some(2));
}

#[test]
fn unreachable_service_exits_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_pullgrid"))
        .args(["--url", "http://127.0.0.1:1", "--timeout", "2", "sites"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn workflow_run_and_status_tables() {
    let s = Server::start();
    let wf = workflow(&s);
    let o = s.cli(&["workflow", "show", &wf]);
    assert!(stdout(&o).contains("Brunel/v18  DIGI  DST"), "{}", stdout(&o));

    let create = ["run", "create", "--workflow", &wf, "--events", "2000", "--per-job", "500", "--token", "t-1"];
    let first = stdout(&s.cli(&create));
    let again = stdout(&s.cli(&create));
    assert_eq!(first, again);
    assert!(first.ends_with(" 4 jobs\n"), "{first}");
    let run = first.split(' ').next().unwrap().to_string();
    assert_eq!(s.services.production.list_runs().unwrap().len(), 1);

    let o = s.cli(&["status", &run]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        format!("run {run}: 4 jobs\nSTATE    JOBS\nWaiting     4\n\nSITE  RUNNING  DONE  FAILED  CPU_SHARE\n")
    );

    let o = s.cli(&["status", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["runs"][0]["states"]["Waiting"], 4);

    let o = s.cli(&["status", "run-nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("UnknownRun"));
}

fn ds(lfn: &str, run: &str) -> DatasetDescription {
    DatasetDescription {
        lfn: lfn.into(),
        data_type: "SIM".into(),
        job_id: JobId::new(format!("{run}-00000000")),
        run_id: RunId::new(run),
        events: 500,
        size_bytes: 1000,
        checksum: 7,
        status: DatasetStatus::Pending,
    }
}

#[test]
fn approve_by_run_takes_exactly_its_pending_datasets() {
    let s = Server::start();
    let b = &s.services.bookkeeping;
    for i in 0..7 {
        b.register_dataset(ds(&format!("/r1/{i}"), "r1")).unwrap();
    }
    for i in 0..3 {
        b.register_dataset(ds(&format!("/r2/{i}"), "r2")).unwrap();
    }
    b.reject(&["/r1/0".into()], "bad").unwrap();
    b.approve(&["/r1/1".into()]).unwrap();

    let o = s.cli(&["dataset", "approve", "--run", "r1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "approved 5 of 5\n");
    let count = |run: &str, status| {
        b.query_datasets(&DatasetQuery {
            run_id: Some(RunId::new(run)),
            status: Some(status),
            ..DatasetQuery::default()
        })
        .unwrap()
        .len()
    };
    assert_eq!(count("r1", DatasetStatus::Approved), 6);
    assert_eq!(count("r1", DatasetStatus::Rejected), 1);
    assert_eq!(count("r2", DatasetStatus::Pending), 3);

    // Approving again by lfn reports each failure and exits 1.
    let o = s.cli(&["dataset", "approve", "/r1/2", "/r2/0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("/r1/2: NotPending"), "{}", stdout(&o));
    assert!(stdout(&o).ends_with("approved 1 of 2\n"));

    let o = s.cli(&["dataset", "reject", "--run", "r2", "--reason", "calibration"]);
    assert!(o.status.success());
    assert_eq!(count("r2", DatasetStatus::Rejected), 2);

    let o = s.cli(&["dataset", "query", "--run", "r1", "--status", "Rejected"]);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2, "{out}");
    assert!(out.lines().nth(1).unwrap().starts_with("/r1/0 "));
}

#[test]
fn publish_then_agent_pulls_over_http() {
    let s = Server::start();
    let wf = workflow(&s);
    let dir = tempfile::tempdir().unwrap();
    let pkg = dir.path().join("pkg");
    std::fs::create_dir_all(pkg.join("bin")).unwrap();
    std::fs::write(pkg.join("bin/run"), "#!/bin/sh\n").unwrap();
    for (sw, dep) in [("Gauss:v5", None), ("Boole:v3", Some("Gauss:v5")), ("Brunel:v18", Some("Boole:v3"))] {
        let mut args = vec!["package", "publish", sw, pkg.to_str().unwrap()];
        if let Some(d) = dep {
            args.extend(["--dep", d]);
        }
        let o = s.cli(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = s.cli(&["package", "list"]);
    assert_eq!(stdout(&o).lines().count(), 4);
    s.cli(&["run", "create", "--workflow", &wf, "--events", "1000", "--per-job", "500"]);

    let conf = dir.path().join("agent.conf");
    std::fs::write(
        &conf,
        format!("site_id = CERN\nwork_dir = {}\npoll_interval = 10m\n", dir.path().join("agent").display()),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pullgrid-agent"))
        .args(["--config", conf.to_str().unwrap(), "--once", "--slots", "4"])
        .env("PULLGRID_URL", &s.url)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stdout(&o);
    assert_eq!(log.matches("kind=pull ").count(), 2, "{log}");
    assert_eq!(log.matches("kind=submit ").count(), 2);
    assert!(log.contains("sw=Brunel/v18 installed"));

    let o = s.cli(&["sites"]);
    assert_eq!(stdout(&o), "SITE  RUNNING  DONE  FAILED  CPU_SHARE\nCERN        2     0       0      0.000\n");
}

#[test]
fn simulate_report_matches_golden() {
    let scenario = repo().join("scenarios/data_challenge.scen");
    let o = Command::new(env!("CARGO_BIN_EXE_pullgrid"))
        .args(["simulate", scenario.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("success rate: ")), "{out}");
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/data_challenge.txt")).unwrap();
    assert_eq!(out, golden);
}

#[test]
fn simulate_rejects_bad_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scen");
    std::fs::write(&bad, "seed 1\nsite A slots=zero\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pullgrid")).args(["simulate", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}
