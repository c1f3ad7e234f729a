//! Transports to the central services and a typed client over them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::model::{JobDescriptor, JobId, JobState, ResourceCapability, Replica, RunId, SiteId, SoftwareRef, WorkflowDefinition, WorkflowId};
use crate::protocol::{
    dataset_to_xml, decode_reply, encode_call, job_from_xml, workflow_from_xml, workflow_to_xml, ProtocolError, RpcCall,
    RpcReply, RpcValue,
};
use crate::services::{
    faults, CatalogCounts, CreateRun, DatasetQuery, JobEvent, RunSummary, ServiceKind, Services, SiteSummary,
    StatusMessage,
};
use crate::swrepo::{Package, PackageInfo, PackageSource, SourceError};
use crate::model::DatasetDescription;
use crate::wire;

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("{0} service unreachable: {1}")]
    Unreachable(&'static str, String),
    #[error("{0}")]
    Protocol(#[from] ProtocolError),
    #[error("http status {0}")]
    HttpStatus(u16),
}

pub trait Transport: Send + Sync {
    fn call(&self, kind: ServiceKind, call: &RpcCall) -> Result<RpcReply, TransportError>;
}

/// In-process transport. Every call is encoded and decoded exactly as over
/// the network; individual services can be switched off to inject outages.
pub struct LoopbackTransport {
    services: Arc<Services>,
    offline: Mutex<BTreeSet<ServiceKind>>,
    counts: Mutex<BTreeMap<(ServiceKind, String), usize>>,
}

impl LoopbackTransport {
    pub fn new(services: Arc<Services>) -> Self {
        LoopbackTransport {
            services,
            offline: Mutex::new(BTreeSet::new()),
            counts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    pub fn set_online(&self, kind: ServiceKind, online: bool) {
        let mut off = self.offline.lock();
        if online {
            off.remove(&kind);
        } else {
            off.insert(kind);
        }
    }

    pub fn is_online(&self, kind: ServiceKind) -> bool {
        !self.offline.lock().contains(&kind)
    }

    /// Calls of `method` that reached the service.
    pub fn call_count(&self, kind: ServiceKind, method: &str) -> usize {
        self.counts.lock().get(&(kind, method.to_string())).copied().unwrap_or(0)
    }
}

impl Transport for LoopbackTransport {
    fn call(&self, kind: ServiceKind, call: &RpcCall) -> Result<RpcReply, TransportError> {
        if !self.is_online(kind) {
            return Err(TransportError::Unreachable(kind.name(), "switched off".into()));
        }
        let body = encode_call(call)?;
        *self.counts.lock().entry((kind, call.method.clone())).or_insert(0) += 1;
        let reply = self.services.handle_bytes(kind, &body);
        Ok(decode_reply(&reply)?)
    }
}

/// Base URLs of the four services.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Endpoints {
    pub production: String,
    pub monitoring: String,
    pub bookkeeping: String,
    pub software: String,
}

impl Endpoints {
    /// All services behind one server, at their standard paths.
    pub fn single(base: &str) -> Self {
        let base = base.trim_end_matches('/');
        let at = |k: ServiceKind| format!("{base}{}", k.path());
        Endpoints {
            production: at(ServiceKind::Production),
            monitoring: at(ServiceKind::Monitoring),
            bookkeeping: at(ServiceKind::Bookkeeping),
            software: at(ServiceKind::Software),
        }
    }

    pub fn url(&self, kind: ServiceKind) -> &str {
        match kind {
            ServiceKind::Production => &self.production,
            ServiceKind::Monitoring => &self.monitoring,
            ServiceKind::Bookkeeping => &self.bookkeeping,
            ServiceKind::Software => &self.software,
        }
    }
}

pub struct HttpTransport {
    endpoints: Endpoints,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoints: Endpoints, timeout: Duration) -> Self {
        HttpTransport {
            endpoints,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Transport for HttpTransport {
    fn call(&self, kind: ServiceKind, call: &RpcCall) -> Result<RpcReply, TransportError> {
        let body = encode_call(call)?;
        let resp = self
            .agent
            .post(self.endpoints.url(kind))
            .set("Content-Type", "text/xml")
            .send_bytes(&body);
        let resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => return Err(TransportError::HttpStatus(code)),
            Err(e) => return Err(TransportError::Unreachable(kind.name(), e.to_string())),
        };
        let mut buf = Vec::new();
        resp.into_reader()
            .take(crate::services::http::MAX_BODY_BYTES)
            .read_to_end(&mut buf)
            .map_err(|e| TransportError::Unreachable(kind.name(), e.to_string()))?;
        Ok(decode_reply(&buf)?)
    }
}

#[derive(Debug, Clone, Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{} ({code}): {message}", faults::name(*code))]
    Fault { code: i32, message: String },
    #[error("unexpected reply: {0}")]
    BadReply(String),
}

impl ClientError {
    pub fn is_unreachable(&self) -> bool {
        matches!(self, ClientError::Transport(TransportError::Unreachable(..)))
    }

    pub fn fault_code(&self) -> Option<i32> {
        match self {
            ClientError::Fault { code, .. } => Some(*code),
            _ => None,
        }
    }
}

impl From<ProtocolError> for ClientError {
    fn from(e: ProtocolError) -> Self {
        ClientError::BadReply(e.to_string())
    }
}

type CResult<T> = Result<T, ClientError>;

/// Typed access to every central service method.
#[derive(Clone)]
pub struct CentralClient {
    transport: Arc<dyn Transport>,
}

fn expect_bool(v: RpcValue) -> CResult<()> {
    match v {
        RpcValue::Bool(true) => Ok(()),
        other => Err(ClientError::BadReply(format!("expected true, got {other:?}"))),
    }
}

fn expect_str(v: RpcValue) -> CResult<String> {
    match v {
        RpcValue::Str(s) => Ok(s),
        other => Err(ClientError::BadReply(format!("expected string, got {}", other.type_name()))),
    }
}

fn expect_array(v: RpcValue) -> CResult<Vec<RpcValue>> {
    match v {
        RpcValue::Array(a) => Ok(a),
        other => Err(ClientError::BadReply(format!("expected array, got {}", other.type_name()))),
    }
}

/// Per-item outcome of a batch bookkeeping call.
pub type ItemResults = Vec<wire::ItemResult>;

impl CentralClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        CentralClient { transport }
    }

    pub fn call(&self, kind: ServiceKind, method: &str, params: Vec<RpcValue>) -> CResult<RpcValue> {
        self.call_raw(kind, &RpcCall::new(method, params))
    }

    pub fn call_raw(&self, kind: ServiceKind, call: &RpcCall) -> CResult<RpcValue> {
        match self.transport.call(kind, call)? {
            RpcReply::Value(v) => Ok(v),
            RpcReply::Fault { code, message } => Err(ClientError::Fault { code, message }),
        }
    }

    pub fn define_workflow(&self, wf: &WorkflowDefinition) -> CResult<WorkflowId> {
        let xml = String::from_utf8(workflow_to_xml(wf)?).map_err(|e| ClientError::BadReply(e.to_string()))?;
        let v = self.call(ServiceKind::Production, "defineWorkflow", vec![xml.into()])?;
        Ok(WorkflowId::new(expect_str(v)?))
    }

    pub fn get_workflow(&self, id: &WorkflowId) -> CResult<WorkflowDefinition> {
        let v = self.call(ServiceKind::Production, "getWorkflow", vec![id.as_str().into()])?;
        Ok(workflow_from_xml(expect_str(v)?.as_bytes())?)
    }

    pub fn create_run(&self, req: &CreateRun) -> CResult<(RunId, u32)> {
        let v = self.call(ServiceKind::Production, "createRun", vec![wire::create_run_to_rpc(req)])?;
        let r = crate::protocol::StructReader::new(&v)?;
        let count = r.int("job_count")?;
        Ok((RunId::new(r.str("run_id")?), count.max(0) as u32))
    }

    pub fn request_job(&self, cap: &ResourceCapability) -> CResult<Option<JobDescriptor>> {
        let v = self.call(ServiceKind::Production, "requestJob", vec![wire::capability_to_rpc(cap)])?;
        let xml = expect_str(v)?;
        if xml.is_empty() {
            return Ok(None);
        }
        Ok(Some(job_from_xml(xml.as_bytes())?))
    }

    pub fn reschedule_job(&self, job: &JobId, reason: &str, site: Option<&SiteId>) -> CResult<JobState> {
        expect_str(self.call_raw(ServiceKind::Production, &reschedule_call(job, reason, site))?)?
            .parse()
            .map_err(|_| ClientError::BadReply("unknown state".into()))
    }

    pub fn run_status(&self, run: &RunId) -> CResult<BTreeMap<JobState, u64>> {
        let v = self.call(ServiceKind::Production, "runStatus", vec![run.as_str().into()])?;
        Ok(wire::run_counts_from_rpc(&v)?)
    }

    pub fn list_runs(&self) -> CResult<Vec<RunSummary>> {
        let v = self.call(ServiceKind::Production, "listRuns", vec![])?;
        Ok(expect_array(v)?.iter().map(wire::run_summary_from_rpc).collect::<Result<_, _>>()?)
    }

    pub fn report_status(&self, m: &StatusMessage) -> CResult<()> {
        expect_bool(self.call_raw(ServiceKind::Monitoring, &report_call(m))?)
    }

    pub fn job_history(&self, job: &JobId) -> CResult<Vec<JobEvent>> {
        let v = self.call(ServiceKind::Monitoring, "jobHistory", vec![job.as_str().into()])?;
        Ok(expect_array(v)?.iter().map(wire::event_from_rpc).collect::<Result<_, _>>()?)
    }

    pub fn site_summary(&self) -> CResult<BTreeMap<SiteId, SiteSummary>> {
        let v = self.call(ServiceKind::Monitoring, "siteSummary", vec![])?;
        Ok(wire::site_summary_from_rpc(&v)?)
    }

    pub fn register_dataset(&self, d: &DatasetDescription) -> CResult<()> {
        expect_bool(self.call_raw(ServiceKind::Bookkeeping, &register_call(d)?)?)
    }

    pub fn approve_datasets(&self, lfns: &[String]) -> CResult<ItemResults> {
        let arr = RpcValue::Array(lfns.iter().map(|l| l.as_str().into()).collect());
        let v = self.call(ServiceKind::Bookkeeping, "approveDatasets", vec![arr])?;
        Ok(expect_array(v)?.iter().map(wire::item_result_from_rpc).collect::<Result<_, _>>()?)
    }

    pub fn reject_datasets(&self, lfns: &[String], reason: &str) -> CResult<ItemResults> {
        let arr = RpcValue::Array(lfns.iter().map(|l| l.as_str().into()).collect());
        let v = self.call(ServiceKind::Bookkeeping, "rejectDatasets", vec![arr, reason.into()])?;
        Ok(expect_array(v)?.iter().map(wire::item_result_from_rpc).collect::<Result<_, _>>()?)
    }

    pub fn add_replica(&self, r: &Replica) -> CResult<()> {
        expect_bool(self.call(ServiceKind::Bookkeeping, "addReplica", vec![wire::replica_to_rpc(r)])?)
    }

    pub fn query_datasets(&self, q: &DatasetQuery) -> CResult<Vec<(DatasetDescription, Vec<Replica>)>> {
        let v = self.call(ServiceKind::Bookkeeping, "queryDatasets", vec![wire::query_to_rpc(q)])?;
        Ok(expect_array(v)?.iter().map(wire::dataset_from_rpc).collect::<Result<_, _>>()?)
    }

    pub fn catalog_counts(&self) -> CResult<CatalogCounts> {
        let v = self.call(ServiceKind::Bookkeeping, "catalogCounts", vec![])?;
        Ok(wire::counts_from_rpc(&v)?)
    }

    pub fn publish_package(&self, p: &Package) -> CResult<()> {
        expect_bool(self.call(ServiceKind::Software, "publishPackage", vec![wire::package_to_rpc(p)])?)
    }

    pub fn fetch_package(&self, sw: &SoftwareRef) -> CResult<Package> {
        let v = self.call(
            ServiceKind::Software,
            "fetchPackage",
            vec![sw.application.as_str().into(), sw.app_version.as_str().into()],
        )?;
        Ok(wire::package_from_rpc(&v)?)
    }

    pub fn query_available(&self) -> CResult<Vec<PackageInfo>> {
        let v = self.call(ServiceKind::Software, "queryAvailable", vec![])?;
        Ok(expect_array(v)?.iter().map(wire::package_info_from_rpc).collect::<Result<_, _>>()?)
    }

    pub fn resolve_deps(&self, sw: &SoftwareRef) -> CResult<Vec<SoftwareRef>> {
        let v = self.call(
            ServiceKind::Software,
            "resolveDeps",
            vec![sw.application.as_str().into(), sw.app_version.as_str().into()],
        )?;
        Ok(wire::software_list_from_rpc(&v)?)
    }
}

/// The encoded calls the agent may spool for later delivery.
pub fn report_call(m: &StatusMessage) -> RpcCall {
    RpcCall::new("reportStatus", vec![wire::status_to_rpc(m)])
}

pub fn register_call(d: &DatasetDescription) -> Result<RpcCall, ProtocolError> {
    let xml = String::from_utf8(dataset_to_xml(d)?).map_err(|e| ProtocolError::MalformedDocument(e.to_string()))?;
    Ok(RpcCall::new("registerDataset", vec![xml.into()]))
}

pub fn reschedule_call(job: &JobId, reason: &str, site: Option<&SiteId>) -> RpcCall {
    let mut params: Vec<RpcValue> = vec![job.as_str().into(), reason.into()];
    if let Some(s) = site {
        params.push(s.as_str().into());
    }
    RpcCall::new("rescheduleJob", params)
}

impl PackageSource for CentralClient {
    fn resolve(&self, sw: &SoftwareRef) -> Result<Vec<SoftwareRef>, SourceError> {
        self.resolve_deps(sw).map_err(|e| source_error(sw, e))
    }

    fn fetch(&self, sw: &SoftwareRef) -> Result<Package, SourceError> {
        self.fetch_package(sw).map_err(|e| source_error(sw, e))
    }
}

fn source_error(sw: &SoftwareRef, e: ClientError) -> SourceError {
    match e.fault_code() {
        Some(faults::UNKNOWN_PACKAGE) => SourceError::Unknown(sw.clone()),
        _ => SourceError::Unavailable(e.to_string()),
    }
}
