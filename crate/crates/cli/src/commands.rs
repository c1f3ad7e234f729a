use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use pullgrid::client::{CentralClient, ClientError, Endpoints, HttpTransport, ItemResults};
use pullgrid::model::{DatasetStatus, JobId, JobState, RunId, SiteId, SoftwareRef, WorkflowId};
use pullgrid::protocol::{format_checksum, workflow_from_xml};
use pullgrid::services::http::HttpServer;
use pullgrid::services::{
    faults, BookkeepingConfig, CreateRun, DatasetQuery, ProductionConfig, Services, ServicesConfig, SystemClock,
};
use pullgrid::sitesim::{parse_scenario, Simulation, SimulationOptions};
use pullgrid::store::Store;
use pullgrid::swrepo::PackageBuilder;
use serde::Serialize;
use thiserror::Error;

use crate::args::{Cli, Command, CreateArgs, DatasetCmd, Format, PackageCmd, QueryArgs, RunCmd, ServeArgs, WorkflowCmd};
use crate::render::{share, table};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0} of {1} items failed")]
    Partial(usize, usize),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

struct Ctx<'a> {
    url: String,
    timeout: Duration,
    format: Format,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn client(&self) -> CentralClient {
        let t = HttpTransport::new(Endpoints::single(&self.url), self.timeout);
        CentralClient::new(Arc::new(t))
    }

    /// Prints `value` as JSON, or `text` in text mode.
    fn emit<T: Serialize>(&mut self, value: &T, text: impl FnOnce() -> String) -> Result<()> {
        match self.format {
            Format::Json => {
                let s = serde_json::to_string_pretty(value).context("encoding output")?;
                writeln!(self.out, "{s}")?;
            }
            Format::Text => write!(self.out, "{}", text())?,
        }
        Ok(())
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut ctx = Ctx {
        url: cli.url,
        timeout: Duration::from_secs(cli.timeout),
        format: cli.format,
        out,
    };
    match cli.command {
        Command::Workflow(WorkflowCmd::Add { file }) => workflow_add(&mut ctx, &file),
        Command::Workflow(WorkflowCmd::Show { id }) => workflow_show(&mut ctx, &id),
        Command::Run(RunCmd::Create(a)) => run_create(&mut ctx, a),
        Command::Run(RunCmd::List) | Command::Status { run: None } => status_all(&mut ctx),
        Command::Status { run: Some(run) } => status_run(&mut ctx, &run),
        Command::Sites => sites(&mut ctx),
        Command::History { job } => history(&mut ctx, &job),
        Command::Dataset(DatasetCmd::Query(q)) => dataset_query(&mut ctx, &q),
        Command::Dataset(DatasetCmd::Approve { lfns, run }) => dataset_decide(&mut ctx, lfns, run, None),
        Command::Dataset(DatasetCmd::Reject { lfns, run, reason }) => dataset_decide(&mut ctx, lfns, run, Some(reason)),
        Command::Package(PackageCmd::Publish { software, dir, deps }) => package_publish(&mut ctx, &software, &dir, &deps),
        Command::Package(PackageCmd::List) => package_list(&mut ctx),
        Command::Simulate { scenario, log } => simulate(&mut ctx, &scenario, log.as_deref()),
        Command::Serve(a) => serve(&mut ctx, a),
    }
}

fn workflow_add(ctx: &mut Ctx, file: &Path) -> Result<()> {
    let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let wf = workflow_from_xml(&bytes).map_err(|e| anyhow::anyhow!("{}: {e}", file.display()))?;
    let id = ctx.client().define_workflow(&wf)?;
    ctx.emit(&id, || format!("{id}\n"))
}

fn workflow_show(ctx: &mut Ctx, id: &str) -> Result<()> {
    let wf = ctx.client().get_workflow(&WorkflowId::new(id))?;
    ctx.emit(&wf, || {
        let mut s = format!("{} {} version {}\n", wf.workflow_id, wf.name, wf.version);
        let rows: Vec<Vec<String>> = wf
            .steps
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let join = |set: &std::collections::BTreeSet<String>| {
                    if set.is_empty() {
                        "-".to_string()
                    } else {
                        set.iter().cloned().collect::<Vec<_>>().join(",")
                    }
                };
                let opts: Vec<String> = st.options.iter().map(|(k, v)| format!("{k}={v}")).collect();
                vec![
                    i.to_string(),
                    st.software().to_string(),
                    join(&st.input_types),
                    join(&st.output_types),
                    opts.join(" "),
                ]
            })
            .collect();
        s.push_str(&table(&["STEP", "SOFTWARE", "IN", "OUT", "OPTIONS"], &rows));
        s
    })
}

#[derive(Serialize)]
struct Created {
    run_id: RunId,
    jobs: u32,
}

fn run_create(ctx: &mut Ctx, a: CreateArgs) -> Result<()> {
    let req = CreateRun {
        workflow_id: WorkflowId::new(a.workflow),
        total_events: a.events,
        events_per_job: a.per_job,
        extra_options: a.options.into_iter().collect(),
        destination_site: a.dest.map(SiteId::new),
        token: a.token,
    };
    let (run_id, jobs) = ctx.client().create_run(&req)?;
    let c = Created { run_id, jobs };
    ctx.emit(&c, || format!("{} {} jobs\n", c.run_id, c.jobs))
}

const STATES: [JobState; 9] = [
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

fn site_rows(summary: &BTreeMap<SiteId, pullgrid::services::SiteSummary>) -> Vec<Vec<String>> {
    summary
        .iter()
        .map(|(site, s)| {
            vec![
                site.to_string(),
                s.running.to_string(),
                s.done.to_string(),
                s.failed.to_string(),
                share(s.cpu_share),
            ]
        })
        .collect()
}

const SITE_HEADERS: [&str; 5] = ["SITE", "RUNNING", "DONE", "FAILED", "CPU_SHARE"];

#[derive(Serialize)]
struct RunStatus {
    run_id: RunId,
    states: BTreeMap<String, u64>,
}

#[derive(Serialize)]
struct StatusReport {
    runs: Vec<RunStatus>,
    sites: BTreeMap<SiteId, pullgrid::services::SiteSummary>,
}

fn state_names(m: BTreeMap<JobState, u64>) -> BTreeMap<String, u64> {
    m.into_iter().map(|(s, n)| (s.as_str().to_string(), n)).collect()
}

fn status_all(ctx: &mut Ctx) -> Result<()> {
    let client = ctx.client();
    let runs = client.list_runs()?;
    let mut report = StatusReport {
        runs: Vec::new(),
        sites: client.site_summary()?,
    };
    let mut rows = Vec::new();
    for r in &runs {
        let counts = client.run_status(&r.run.run_id)?;
        let n = |pred: &dyn Fn(JobState) -> bool| -> u64 { counts.iter().filter(|(s, _)| pred(**s)).map(|(_, n)| n).sum() };
        rows.push(vec![
            r.run.run_id.to_string(),
            r.run.workflow_id.to_string(),
            r.job_count.to_string(),
            n(&|s| matches!(s, JobState::Created | JobState::Waiting)).to_string(),
            n(&|s| s.is_active()).to_string(),
            n(&|s| s == JobState::Done).to_string(),
            n(&|s| s == JobState::Failed).to_string(),
        ]);
        report.runs.push(RunStatus {
            run_id: r.run.run_id.clone(),
            states: state_names(counts),
        });
    }
    ctx.emit(&report, || {
        let mut s = table(&["RUN", "WORKFLOW", "JOBS", "WAITING", "ACTIVE", "DONE", "FAILED"], &rows);
        s.push('\n');
        s.push_str(&table(&SITE_HEADERS, &site_rows(&report.sites)));
        s
    })
}

fn status_run(ctx: &mut Ctx, run: &str) -> Result<()> {
    let client = ctx.client();
    let run_id = RunId::new(run);
    let counts = client.run_status(&run_id)?;
    let sites = client.site_summary()?;
    let rows: Vec<Vec<String>> = STATES
        .iter()
        .filter_map(|s| counts.get(s).map(|n| vec![s.as_str().to_string(), n.to_string()]))
        .collect();
    let total: u64 = counts.values().sum();
    let report = StatusReport {
        runs: vec![RunStatus {
            run_id,
            states: state_names(counts),
        }],
        sites,
    };
    ctx.emit(&report, || {
        let mut s = format!("run {run}: {total} jobs\n");
        s.push_str(&table(&["STATE", "JOBS"], &rows));
        s.push('\n');
        s.push_str(&table(&SITE_HEADERS, &site_rows(&report.sites)));
        s
    })
}

fn sites(ctx: &mut Ctx) -> Result<()> {
    let summary = ctx.client().site_summary()?;
    ctx.emit(&summary, || table(&SITE_HEADERS, &site_rows(&summary)))
}

fn history(ctx: &mut Ctx, job: &str) -> Result<()> {
    let events = ctx.client().job_history(&JobId::new(job))?;
    ctx.emit(&events, || {
        let rows: Vec<Vec<String>> = events
            .iter()
            .map(|e| {
                let mut flags = Vec::new();
                if e.illegal_transition {
                    flags.push("illegal");
                }
                if e.out_of_order {
                    flags.push("late");
                }
                vec![
                    e.timestamp.to_string(),
                    e.attempt.to_string(),
                    e.state.as_str().to_string(),
                    e.site_id.as_ref().map_or("-".into(), |s| s.to_string()),
                    flags.join(","),
                    e.note.clone(),
                ]
            })
            .collect();
        table(&["TIME", "ATTEMPT", "STATE", "SITE", "FLAGS", "NOTE"], &rows)
    })
}

fn to_query(q: &QueryArgs) -> Result<DatasetQuery> {
    let status = match &q.status {
        Some(s) => Some(
            s.parse::<DatasetStatus>()
                .map_err(|_| CliError::Usage(format!("unknown status {s:?}; expected Pending, Approved or Rejected")))?,
        ),
        None => None,
    };
    Ok(DatasetQuery {
        run_id: q.run.clone().map(RunId::new),
        data_type: q.data_type.clone(),
        status,
        min_events: q.min_events,
    })
}

fn dataset_query(ctx: &mut Ctx, q: &QueryArgs) -> Result<()> {
    let found = ctx.client().query_datasets(&to_query(q)?)?;
    #[derive(Serialize)]
    struct Entry<'a> {
        #[serde(flatten)]
        dataset: &'a pullgrid::model::DatasetDescription,
        replicas: &'a [pullgrid::model::Replica],
    }
    let entries: Vec<Entry> = found
        .iter()
        .map(|(d, r)| Entry {
            dataset: d,
            replicas: r,
        })
        .collect();
    ctx.emit(&entries, || {
        let rows: Vec<Vec<String>> = found
            .iter()
            .map(|(d, r)| {
                let ses: Vec<&str> = r.iter().map(|r| r.storage_element.as_str()).collect();
                vec![
                    d.lfn.clone(),
                    d.data_type.clone(),
                    d.run_id.to_string(),
                    d.events.to_string(),
                    d.size_bytes.to_string(),
                    format_checksum(d.checksum),
                    d.status.as_str().to_string(),
                    if ses.is_empty() { "-".into() } else { ses.join(",") },
                ]
            })
            .collect();
        table(&["LFN", "TYPE", "RUN", "EVENTS", "BYTES", "CHECKSUM", "STATUS", "REPLICAS"], &rows)
    })
}

#[derive(Serialize)]
struct Decision {
    lfn: String,
    ok: bool,
    error: Option<String>,
}

fn dataset_decide(ctx: &mut Ctx, lfns: Vec<String>, run: Option<String>, reject: Option<String>) -> Result<()> {
    let client = ctx.client();
    let lfns = match (lfns.is_empty(), run) {
        (false, None) => lfns,
        (true, Some(run)) => client
            .query_datasets(&DatasetQuery {
                run_id: Some(RunId::new(run)),
                status: Some(DatasetStatus::Pending),
                ..DatasetQuery::default()
            })?
            .into_iter()
            .map(|(d, _)| d.lfn)
            .collect(),
        _ => return Err(CliError::Usage("give either lfns or --run, not both or neither".into())),
    };
    let results: ItemResults = if lfns.is_empty() {
        Vec::new()
    } else {
        match &reject {
            Some(reason) => client.reject_datasets(&lfns, reason)?,
            None => client.approve_datasets(&lfns)?,
        }
    };
    let decisions: Vec<Decision> = results
        .into_iter()
        .map(|(lfn, r)| Decision {
            lfn,
            ok: r.is_ok(),
            error: r.err().map(|(code, msg)| format!("{}: {msg}", faults::name(code))),
        })
        .collect();
    let failed = decisions.iter().filter(|d| !d.ok).count();
    let verb = if reject.is_some() { "rejected" } else { "approved" };
    ctx.emit(&decisions, || {
        let mut s = String::new();
        for d in decisions.iter().filter(|d| !d.ok) {
            s.push_str(&format!("{}: {}\n", d.lfn, d.error.as_deref().unwrap_or("")));
        }
        s.push_str(&format!("{verb} {} of {}\n", decisions.len() - failed, decisions.len()));
        s
    })?;
    if failed > 0 {
        return Err(CliError::Partial(failed, decisions.len()));
    }
    Ok(())
}

pub fn parse_software(s: &str) -> Result<SoftwareRef> {
    match s.split_once(':').or_else(|| s.split_once('/')) {
        Some((a, v)) if !a.is_empty() && !v.is_empty() => Ok(SoftwareRef::new(a, v)),
        _ => Err(CliError::Usage(format!("expected App:version, got {s:?}"))),
    }
}

fn collect_files(root: &Path, dir: &Path, b: PackageBuilder) -> Result<PackageBuilder> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    let mut b = b;
    for e in entries {
        let path = e.path();
        if e.file_type()?.is_dir() {
            b = collect_files(root, &path, b)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        let data = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        b = if is_executable(&e.metadata()?) {
            b.executable(rel, data)
        } else {
            b.file(rel, data)
        };
    }
    Ok(b)
}

#[cfg(unix)]
fn is_executable(m: &fs::Metadata) -> bool {
    use std::os::unix::fs::PermissionsExt;
    m.permissions().mode() & 0o111 != 0
}

#[cfg(not(unix))]
fn is_executable(_: &fs::Metadata) -> bool {
    false
}

fn package_publish(ctx: &mut Ctx, software: &str, dir: &Path, deps: &[String]) -> Result<()> {
    let sw = parse_software(software)?;
    let mut b = PackageBuilder::new(sw.application.clone(), sw.app_version.clone());
    for d in deps {
        b = b.depends_on(parse_software(d)?);
    }
    let package = collect_files(dir, dir, b)?.build().context("packing")?;
    ctx.client().publish_package(&package)?;
    ctx.emit(&sw, || format!("published {sw}\n"))
}

fn package_list(ctx: &mut Ctx) -> Result<()> {
    let list = ctx.client().query_available()?;
    ctx.emit(&list, || {
        let rows: Vec<Vec<String>> = list
            .iter()
            .map(|p| {
                let deps: Vec<String> = p.dependencies.iter().map(|d| d.to_string()).collect();
                vec![
                    p.software.to_string(),
                    p.size_bytes.to_string(),
                    format_checksum(p.checksum),
                    if deps.is_empty() { "-".into() } else { deps.join(",") },
                ]
            })
            .collect();
        table(&["PACKAGE", "BYTES", "CHECKSUM", "DEPENDS"], &rows)
    })
}

fn simulate(ctx: &mut Ctx, scenario: &Path, log: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
    let sc = parse_scenario(&text).map_err(|e| anyhow::anyhow!("{}: {e}", scenario.display()))?;
    let mut sim = Simulation::new(&sc, SimulationOptions::default()).context("building simulation")?;
    let acc = sim.run().context("running simulation")?;
    if let Some(path) = log {
        fs::write(path, sim.log_text()).with_context(|| format!("writing {}", path.display()))?;
    }
    ctx.emit(&acc, || acc.to_string())
}

fn serve(ctx: &mut Ctx, a: ServeArgs) -> Result<()> {
    let store = Store::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let config = ServicesConfig {
        production: ProductionConfig {
            max_reschedules: a.max_reschedules,
        },
        bookkeeping: BookkeepingConfig {
            auto_approve: a.auto_approve,
        },
    };
    let services = Arc::new(Services::new(Arc::new(store), Arc::new(SystemClock), config));
    let server = HttpServer::start(services, &a.listen, a.workers).with_context(|| format!("listening on {}", a.listen))?;
    writeln!(ctx.out, "serving on {}", server.url())?;
    ctx.out.flush()?;
    server.join();
    Ok(())
}
