use std::fs;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use pullgrid::agent::{Agent, AgentConfig};
use pullgrid::client::{CentralClient, Endpoints, HttpTransport};
use pullgrid::model::Timestamp;
use pullgrid::services::{Clock, SystemClock};
use pullgrid::sitesim::{SimSite, SiteConfig, Workload};

use crate::args::AgentCli;

/// Runs the agent loop until killed, or one cycle with `--once`.
pub fn run(cli: AgentCli, out: &mut dyn Write) -> Result<()> {
    let path = &cli.config;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = AgentConfig::parse(&text).with_context(|| format!("{}", path.display()))?;
    let endpoints = config.endpoints.get_or_insert_with(|| Endpoints::single(&cli.url)).clone();
    let transport = Arc::new(HttpTransport::new(endpoints, Duration::from_secs(cli.timeout)));
    let client = CentralClient::new(transport.clone());

    let mut site_config = SiteConfig::new(config.site_id.clone(), cli.slots, cli.cpu);
    site_config.wn_outbound_connectivity = cli.wn_outbound;
    site_config.validate().context("site")?;
    if cli.speedup.is_nan() || cli.speedup <= 0.0 {
        anyhow::bail!("speedup must be positive");
    }
    let poll = Duration::from_millis((config.poll_interval_ms as f64 / cli.speedup) as u64);
    let site_id = config.site_id.clone();
    let mut agent = Agent::open(config, transport).context("opening agent")?;
    let mut site = SimSite::new(site_config, Workload::default());

    let origin = SystemClock.now();
    let started = Instant::now();
    loop {
        let now = Timestamp(origin.millis() + (started.elapsed().as_millis() as f64 * cli.speedup) as u64);
        for e in site.advance(now).into_iter().chain(site.drain_log()) {
            writeln!(out, "t={} site={site_id} kind={} detail={}", e.time, e.kind, e.detail)?;
        }
        for m in site.drain_messages() {
            if cli.wn_outbound {
                if let Err(e) = client.report_status(&m) {
                    writeln!(out, "t={now} site={site_id} kind=wn_status_lost detail=job={} {e}", m.job_id)?;
                }
            } else {
                match agent.relay(&m, now) {
                    Ok(a) => writeln!(out, "t={now} site={site_id} kind={} detail={}", a.kind(), a.detail())?,
                    Err(e) => writeln!(out, "t={now} site={site_id} kind=error detail=relay: {e}")?,
                }
            }
        }
        let report = agent.run_cycle(&mut site);
        for a in &report.actions {
            writeln!(out, "t={} site={site_id} kind={} detail={}", report.at, a.kind(), a.detail())?;
        }
        site.drain_deliveries();
        out.flush()?;
        if cli.once {
            return Ok(());
        }
        std::thread::sleep(poll);
    }
}
