//! Conversions between domain values and XML-RPC values, shared by the
//! service dispatcher and the clients.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{
    DatasetDescription, DatasetStatus, JobId, JobState, Replica, ResourceCapability, RunId, SiteId, SoftwareRef,
    Timestamp, WorkflowId,
};
use crate::protocol::{format_checksum, parse_checksum, ProtocolError, RpcValue, StructBuilder, StructReader};
use crate::services::{
    CatalogCounts, CreateRun, DatasetQuery, EventSource, JobEvent, RunSummary, SiteSummary, StatusMessage,
};
use crate::swrepo::{Package, PackageInfo};

type R<T> = Result<T, ProtocolError>;

fn bad(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedDocument(msg.into())
}

fn state(s: &str) -> R<JobState> {
    s.parse().map_err(|_| bad(format!("unknown job state {s:?}")))
}

pub fn software_to_rpc(sw: &SoftwareRef) -> RpcValue {
    StructBuilder::new()
        .set("application", sw.application.as_str())
        .set("app_version", sw.app_version.as_str())
        .build()
}

pub fn software_from_rpc(v: &RpcValue) -> R<SoftwareRef> {
    let r = StructReader::new(v)?;
    Ok(SoftwareRef::new(r.str("application")?, r.str("app_version")?))
}

pub fn software_list_to_rpc<'a>(items: impl IntoIterator<Item = &'a SoftwareRef>) -> RpcValue {
    RpcValue::Array(items.into_iter().map(software_to_rpc).collect())
}

pub fn software_list_from_rpc(v: &RpcValue) -> R<Vec<SoftwareRef>> {
    v.as_array()
        .ok_or_else(|| bad("expected array of packages"))?
        .iter()
        .map(software_from_rpc)
        .collect()
}

pub fn capability_to_rpc(c: &ResourceCapability) -> RpcValue {
    StructBuilder::new()
        .set("site_id", c.site_id.as_str())
        .set("cpu_power", c.cpu_power)
        .set_u64("free_disk_mb", c.free_disk_mb)
        .set("queue_occupancy", c.queue_occupancy)
        .set("installed_software", software_list_to_rpc(&c.installed_software))
        .build()
}

pub fn capability_from_rpc(v: &RpcValue) -> R<ResourceCapability> {
    let r = StructReader::new(v)?;
    let installed: BTreeSet<SoftwareRef> = match r.opt("installed_software") {
        Some(list) => software_list_from_rpc(list)?.into_iter().collect(),
        None => BTreeSet::new(),
    };
    Ok(ResourceCapability {
        site_id: SiteId::new(r.str("site_id")?),
        cpu_power: r.double("cpu_power")?,
        free_disk_mb: r.parse("free_disk_mb")?,
        queue_occupancy: r.double("queue_occupancy")?,
        installed_software: installed,
    })
}

pub fn status_to_rpc(m: &StatusMessage) -> RpcValue {
    StructBuilder::new()
        .set("job_id", m.job_id.as_str())
        .set("reported_state", m.reported_state.as_str())
        .set_opt("step_index", m.step_index.map(|s| s as i32))
        .set("note", m.note.as_str())
        .set("site_id", m.site_id.as_str())
        .set_u64("timestamp", m.timestamp.millis())
        .set_opt("cpu_seconds", m.cpu_seconds)
        .build()
}

pub fn status_from_rpc(v: &RpcValue) -> R<StatusMessage> {
    let r = StructReader::new(v)?;
    Ok(StatusMessage {
        job_id: JobId::new(r.str("job_id")?),
        reported_state: state(r.str("reported_state")?)?,
        step_index: opt_u32(&r, "step_index")?,
        note: r.opt_str("note")?.unwrap_or("").to_string(),
        site_id: SiteId::new(r.str("site_id")?),
        timestamp: Timestamp(r.parse("timestamp")?),
        cpu_seconds: r.opt_double("cpu_seconds")?,
    })
}

fn opt_u32(r: &StructReader<'_>, name: &str) -> R<Option<u32>> {
    match r.opt_int(name)? {
        None => Ok(None),
        Some(i) if i >= 0 => Ok(Some(i as u32)),
        Some(i) => Err(bad(format!("member {name}: negative value {i}"))),
    }
}

pub fn event_to_rpc(e: &JobEvent) -> RpcValue {
    StructBuilder::new()
        .set_u64("timestamp", e.timestamp.millis())
        .set("state", e.state.as_str())
        .set("attempt", e.attempt as i32)
        .set_opt("site_id", e.site_id.as_ref().map(|s| s.as_str()))
        .set_opt("step_index", e.step_index.map(|s| s as i32))
        .set("note", e.note.as_str())
        .set_opt("cpu_seconds", e.cpu_seconds)
        .set("source", e.source.as_str())
        .set("illegal_transition", e.illegal_transition)
        .set("out_of_order", e.out_of_order)
        .build()
}

pub fn event_from_rpc(v: &RpcValue) -> R<JobEvent> {
    let r = StructReader::new(v)?;
    let source = match r.str("source")? {
        "service" => EventSource::Service,
        "agent" => EventSource::Agent,
        other => return Err(bad(format!("unknown event source {other:?}"))),
    };
    Ok(JobEvent {
        timestamp: Timestamp(r.parse("timestamp")?),
        state: state(r.str("state")?)?,
        attempt: opt_u32(&r, "attempt")?.ok_or_else(|| ProtocolError::MissingField("attempt".into()))?,
        site_id: r.opt_str("site_id")?.map(SiteId::new),
        step_index: opt_u32(&r, "step_index")?,
        note: r.str("note")?.to_string(),
        cpu_seconds: r.opt_double("cpu_seconds")?,
        source,
        illegal_transition: r.bool("illegal_transition")?,
        out_of_order: r.bool("out_of_order")?,
    })
}

pub fn site_summary_to_rpc(m: &BTreeMap<SiteId, SiteSummary>) -> RpcValue {
    let mut b = StructBuilder::new();
    for (site, s) in m {
        b = b.set(
            site.as_str(),
            StructBuilder::new()
                .set_u64("running", s.running)
                .set_u64("done", s.done)
                .set_u64("failed", s.failed)
                .set("cpu_share", s.cpu_share)
                .build(),
        );
    }
    b.build()
}

pub fn site_summary_from_rpc(v: &RpcValue) -> R<BTreeMap<SiteId, SiteSummary>> {
    let members = v.as_struct().ok_or_else(|| bad("expected struct"))?;
    members
        .iter()
        .map(|(site, sv)| {
            let r = StructReader::new(sv)?;
            Ok((
                SiteId::new(site.as_str()),
                SiteSummary {
                    running: r.parse("running")?,
                    done: r.parse("done")?,
                    failed: r.parse("failed")?,
                    cpu_share: r.double("cpu_share")?,
                },
            ))
        })
        .collect()
}

pub fn create_run_to_rpc(c: &CreateRun) -> RpcValue {
    let mut opts = StructBuilder::new();
    for (k, v) in &c.extra_options {
        opts = opts.set(k, v.as_str());
    }
    StructBuilder::new()
        .set("workflow_id", c.workflow_id.as_str())
        .set_u64("total_events", c.total_events)
        .set_u64("events_per_job", c.events_per_job)
        .set("extra_options", opts.build())
        .set_opt("destination_site", c.destination_site.as_ref().map(|s| s.as_str()))
        .set_opt("token", c.token.as_deref())
        .build()
}

pub fn create_run_from_rpc(v: &RpcValue) -> R<CreateRun> {
    let r = StructReader::new(v)?;
    let mut extra_options = BTreeMap::new();
    if let Some(o) = r.opt("extra_options") {
        for (k, v) in o.as_struct().ok_or_else(|| bad("extra_options must be a struct"))? {
            let text = v.as_str().ok_or_else(|| bad(format!("option {k} must be a string")))?;
            extra_options.insert(k.clone(), text.to_string());
        }
    }
    Ok(CreateRun {
        workflow_id: WorkflowId::new(r.str("workflow_id")?),
        total_events: r.parse("total_events")?,
        events_per_job: r.parse("events_per_job")?,
        extra_options,
        destination_site: r.opt_str("destination_site")?.filter(|s| !s.is_empty()).map(SiteId::new),
        token: r.opt_str("token")?.map(str::to_string),
    })
}

pub fn run_counts_to_rpc(m: &BTreeMap<JobState, u64>) -> RpcValue {
    let mut b = StructBuilder::new();
    for (s, n) in m {
        b = b.set_u64(s.as_str(), *n);
    }
    b.build()
}

pub fn run_counts_from_rpc(v: &RpcValue) -> R<BTreeMap<JobState, u64>> {
    let members = v.as_struct().ok_or_else(|| bad("expected struct"))?;
    let r = StructReader::new(v)?;
    members.keys().map(|k| Ok((state(k)?, r.parse(k)?))).collect()
}

pub fn run_summary_to_rpc(s: &RunSummary) -> RpcValue {
    StructBuilder::new()
        .set("run_id", s.run.run_id.as_str())
        .set("workflow_id", s.run.workflow_id.as_str())
        .set_u64("total_events", s.run.total_events)
        .set_u64("events_per_job", s.run.events_per_job)
        .set_opt("destination_site", s.run.destination_site.as_ref().map(|d| d.as_str()))
        .set_u64("created_at", s.run.created_at.millis())
        .set("job_count", s.job_count as i32)
        .build()
}

/// Run summaries travel without their option maps.
pub fn run_summary_from_rpc(v: &RpcValue) -> R<RunSummary> {
    let r = StructReader::new(v)?;
    Ok(RunSummary {
        run: crate::model::ProductionRun {
            run_id: RunId::new(r.str("run_id")?),
            workflow_id: WorkflowId::new(r.str("workflow_id")?),
            total_events: r.parse("total_events")?,
            events_per_job: r.parse("events_per_job")?,
            extra_options: BTreeMap::new(),
            destination_site: r.opt_str("destination_site")?.map(SiteId::new),
            created_at: Timestamp(r.parse("created_at")?),
        },
        job_count: opt_u32(&r, "job_count")?.ok_or_else(|| ProtocolError::MissingField("job_count".into()))?,
    })
}

pub fn replica_to_rpc(rep: &Replica) -> RpcValue {
    StructBuilder::new()
        .set("lfn", rep.lfn.as_str())
        .set("storage_element", rep.storage_element.as_str())
        .set("url", rep.url.as_str())
        .set_u64("registered_at", rep.registered_at.millis())
        .set("checksum", format_checksum(rep.checksum))
        .build()
}

pub fn replica_from_rpc(v: &RpcValue) -> R<Replica> {
    let r = StructReader::new(v)?;
    Ok(Replica {
        lfn: r.str("lfn")?.to_string(),
        storage_element: r.str("storage_element")?.to_string(),
        url: r.str("url")?.to_string(),
        registered_at: Timestamp(r.opt_parse("registered_at")?.unwrap_or(0)),
        checksum: parse_checksum(r.str("checksum")?)?,
    })
}

pub fn query_to_rpc(q: &DatasetQuery) -> RpcValue {
    StructBuilder::new()
        .set_opt("run_id", q.run_id.as_ref().map(|r| r.as_str()))
        .set_opt("data_type", q.data_type.as_deref())
        .set_opt("status", q.status.map(|s| s.as_str()))
        .set_opt("min_events", q.min_events.map(|m| m.to_string()))
        .build()
}

pub fn query_from_rpc(v: &RpcValue) -> R<DatasetQuery> {
    let r = StructReader::new(v)?;
    Ok(DatasetQuery {
        run_id: r.opt_str("run_id")?.map(RunId::new),
        data_type: r.opt_str("data_type")?.map(str::to_string),
        status: match r.opt_str("status")? {
            Some(s) => Some(s.parse::<DatasetStatus>().map_err(|_| bad(format!("unknown status {s:?}")))?),
            None => None,
        },
        min_events: r.opt_parse("min_events")?,
    })
}

pub fn dataset_to_rpc(d: &DatasetDescription, replicas: &[Replica]) -> RpcValue {
    StructBuilder::new()
        .set("lfn", d.lfn.as_str())
        .set("data_type", d.data_type.as_str())
        .set("job_id", d.job_id.as_str())
        .set("run_id", d.run_id.as_str())
        .set_u64("events", d.events)
        .set_u64("size_bytes", d.size_bytes)
        .set("checksum", format_checksum(d.checksum))
        .set("status", d.status.as_str())
        .set("replicas", RpcValue::Array(replicas.iter().map(replica_to_rpc).collect()))
        .build()
}

pub fn dataset_from_rpc(v: &RpcValue) -> R<(DatasetDescription, Vec<Replica>)> {
    let r = StructReader::new(v)?;
    let d = DatasetDescription {
        lfn: r.str("lfn")?.to_string(),
        data_type: r.str("data_type")?.to_string(),
        job_id: JobId::new(r.str("job_id")?),
        run_id: RunId::new(r.str("run_id")?),
        events: r.parse("events")?,
        size_bytes: r.parse("size_bytes")?,
        checksum: parse_checksum(r.str("checksum")?)?,
        status: r.str("status")?.parse().map_err(|_| bad("unknown dataset status"))?,
    };
    let reps = r.array("replicas")?.iter().map(replica_from_rpc).collect::<R<Vec<_>>>()?;
    Ok((d, reps))
}

/// Outcome of one item of a batch call: ok, or a fault code and message.
pub fn item_result_to_rpc(lfn: &str, res: Result<(), (i32, String)>) -> RpcValue {
    let b = StructBuilder::new().set("lfn", lfn).set("ok", res.is_ok());
    match res {
        Ok(()) => b.build(),
        Err((code, msg)) => b.set("fault_code", code).set("message", msg).build(),
    }
}

/// One lfn's outcome in a batch approve/reject: ok, or a fault code and message.
pub type ItemResult = (String, Result<(), (i32, String)>);

pub fn item_result_from_rpc(v: &RpcValue) -> R<ItemResult> {
    let r = StructReader::new(v)?;
    let lfn = r.str("lfn")?.to_string();
    if r.bool("ok")? {
        Ok((lfn, Ok(())))
    } else {
        Ok((lfn, Err((r.int("fault_code")?, r.opt_str("message")?.unwrap_or("").to_string()))))
    }
}

pub fn counts_to_rpc(c: &CatalogCounts) -> RpcValue {
    StructBuilder::new()
        .set_u64("pending", c.pending)
        .set_u64("approved", c.approved)
        .set_u64("rejected", c.rejected)
        .set_u64("replicas", c.replicas)
        .build()
}

pub fn counts_from_rpc(v: &RpcValue) -> R<CatalogCounts> {
    let r = StructReader::new(v)?;
    Ok(CatalogCounts {
        pending: r.parse("pending")?,
        approved: r.parse("approved")?,
        rejected: r.parse("rejected")?,
        replicas: r.parse("replicas")?,
    })
}

/// The payload travels as hex text; the subset has no base64 type.
pub fn package_to_rpc(p: &Package) -> RpcValue {
    StructBuilder::new()
        .set("application", p.application.as_str())
        .set("app_version", p.app_version.as_str())
        .set("payload", hex::encode(&p.payload))
        .set("bootstrap", p.bootstrap.as_str())
        .set("dependencies", software_list_to_rpc(&p.dependencies))
        .set("checksum", format_checksum(p.checksum))
        .build()
}

pub fn package_from_rpc(v: &RpcValue) -> R<Package> {
    let r = StructReader::new(v)?;
    Ok(Package {
        application: r.str("application")?.to_string(),
        app_version: r.str("app_version")?.to_string(),
        payload: hex::decode(r.str("payload")?).map_err(|e| bad(format!("payload: {e}")))?,
        bootstrap: r.str("bootstrap")?.to_string(),
        dependencies: software_list_from_rpc(r.get("dependencies")?)?,
        checksum: parse_checksum(r.str("checksum")?)?,
    })
}

pub fn package_info_to_rpc(p: &PackageInfo) -> RpcValue {
    StructBuilder::new()
        .set("software", software_to_rpc(&p.software))
        .set("dependencies", software_list_to_rpc(&p.dependencies))
        .set("checksum", format_checksum(p.checksum))
        .set_u64("size_bytes", p.size_bytes)
        .build()
}

pub fn package_info_from_rpc(v: &RpcValue) -> R<PackageInfo> {
    let r = StructReader::new(v)?;
    Ok(PackageInfo {
        software: software_from_rpc(r.get("software")?)?,
        dependencies: software_list_from_rpc(r.get("dependencies")?)?,
        checksum: parse_checksum(r.str("checksum")?)?,
        size_bytes: r.parse("size_bytes")?,
    })
}
