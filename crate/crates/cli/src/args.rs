use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

/// Operator tool for the pullgrid production services.
#[derive(Debug, Parser)]
#[command(name = "pullgrid", version)]
pub struct Cli {
    /// Base URL of the central services.
    #[arg(long, global = true, env = "PULLGRID_URL", default_value = "http://127.0.0.1:4040")]
    pub url: String,

    /// Request timeout in seconds.
    #[arg(long, global = true, env = "PULLGRID_TIMEOUT", default_value_t = 30)]
    pub timeout: u64,

    #[arg(long, global = true, env = "PULLGRID_FORMAT", value_enum, default_value_t = Format::Text)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    Workflow(WorkflowCmd),
    #[command(subcommand)]
    Run(RunCmd),
    /// Job counts by state for one run, or for every run, plus per-site totals.
    Status { run: Option<String> },
    /// Per-site running/done/failed counts and CPU share.
    Sites,
    /// Monitoring history of one job.
    History { job: String },
    #[command(subcommand)]
    Dataset(DatasetCmd),
    #[command(subcommand)]
    Package(PackageCmd),
    /// Runs a scenario file in the site simulator and prints the accounting.
    Simulate {
        scenario: PathBuf,
        /// Also write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Serves all four central services over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum WorkflowCmd {
    /// Defines a workflow from an XML document.
    Add { file: PathBuf },
    Show { id: String },
}

#[derive(Debug, Subcommand)]
pub enum RunCmd {
    Create(CreateArgs),
    List,
}

#[derive(Debug, Args)]
pub struct CreateArgs {
    #[arg(long)]
    pub workflow: String,
    #[arg(long)]
    pub events: u64,
    #[arg(long)]
    pub per_job: u64,
    /// Only this site may pull the run's jobs.
    #[arg(long)]
    pub dest: Option<String>,
    /// Step option override, `key=value`; repeatable.
    #[arg(long = "option", value_parser = parse_kv)]
    pub options: Vec<(String, String)>,
    /// Idempotency token; repeating it returns the first run.
    #[arg(long, env = "PULLGRID_TOKEN")]
    pub token: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    Query(QueryArgs),
    /// Approves the given lfns, or every pending dataset of a run.
    Approve {
        lfns: Vec<String>,
        #[arg(long)]
        run: Option<String>,
    },
    /// Rejects the given lfns, or every pending dataset of a run.
    Reject {
        lfns: Vec<String>,
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        reason: String,
    },
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub run: Option<String>,
    #[arg(long = "type")]
    pub data_type: Option<String>,
    /// Pending, Approved or Rejected.
    #[arg(long)]
    pub status: Option<String>,
    #[arg(long)]
    pub min_events: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum PackageCmd {
    /// Packs a directory and publishes it as `App:version`.
    Publish {
        software: String,
        dir: PathBuf,
        /// Dependency `App:version`; repeatable.
        #[arg(long = "dep")]
        deps: Vec<String>,
    },
    List,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PULLGRID_LISTEN", default_value = "127.0.0.1:4040")]
    pub listen: String,
    /// Directory of the production database.
    #[arg(long, env = "PULLGRID_DATA")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub workers: usize,
    #[arg(long, default_value_t = 3)]
    pub max_reschedules: u32,
    /// Register datasets as Approved instead of Pending.
    #[arg(long)]
    pub auto_approve: bool,
}

/// Runs one production agent against a simulated local batch system.
#[derive(Debug, Parser)]
#[command(name = "pullgrid-agent", version)]
pub struct AgentCli {
    #[arg(long, env = "PULLGRID_AGENT_CONFIG")]
    pub config: PathBuf,
    /// Run a single cycle and exit.
    #[arg(long)]
    pub once: bool,
    /// Used when the config names no services.
    #[arg(long, env = "PULLGRID_URL", default_value = "http://127.0.0.1:4040")]
    pub url: String,
    #[arg(long, env = "PULLGRID_TIMEOUT", default_value_t = 30)]
    pub timeout: u64,
    #[arg(long, default_value_t = 4)]
    pub slots: u32,
    #[arg(long, default_value_t = 1.0)]
    pub cpu: f64,
    /// Simulated seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    pub speedup: f64,
    /// Worker nodes report straight to monitoring; otherwise through the agent.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub wn_outbound: bool,
}

pub fn parse_kv(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}
