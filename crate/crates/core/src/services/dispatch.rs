//! Maps XML-RPC calls onto service operations and errors onto fault codes.

use super::faults::*;
use super::*;
use crate::model::{JobId, RunId, SiteId, WorkflowId};
use crate::protocol::{
    decode_call, encode_reply, job_to_xml, workflow_from_xml, workflow_to_xml, ProtocolError, RpcCall, RpcReply,
    RpcValue,
};
use crate::store::StoreError;
use crate::swrepo::RepoError;
use crate::wire;

/// A fault: code plus human-readable message.
pub(crate) struct Fault(i32, String);

type Handled = Result<RpcValue, Fault>;

impl From<ProtocolError> for Fault {
    fn from(e: ProtocolError) -> Self {
        Fault(BAD_REQUEST, e.to_string())
    }
}

impl From<StoreError> for Fault {
    fn from(e: StoreError) -> Self {
        Fault(INTERNAL, e.to_string())
    }
}

impl From<ProdError> for Fault {
    fn from(e: ProdError) -> Self {
        let code = match &e {
            ProdError::UnknownWorkflow(_) => UNKNOWN_WORKFLOW,
            ProdError::UnknownRun(_) => UNKNOWN_RUN,
            ProdError::UnknownJob(_) => UNKNOWN_JOB,
            ProdError::IllegalState(_) => ILLEGAL_STATE,
            ProdError::InvalidPipeline(_) => INVALID_PIPELINE,
            ProdError::DuplicateId(_) => DUPLICATE_ID,
            ProdError::InvalidParameters(_) => INVALID_PARAMETERS,
            ProdError::InvalidCapability => BAD_REQUEST,
            ProdError::Store(_) => INTERNAL,
        };
        Fault(code, e.to_string())
    }
}

impl From<MonError> for Fault {
    fn from(e: MonError) -> Self {
        let code = match &e {
            MonError::UnknownJob(_) => UNKNOWN_JOB,
            MonError::InvalidMessage(_) => BAD_REQUEST,
            MonError::Store(_) => INTERNAL,
        };
        Fault(code, e.to_string())
    }
}

pub(crate) fn book_fault_code(e: &BookError) -> i32 {
    match e {
        BookError::MalformedDocument(_) => MALFORMED_DOCUMENT,
        BookError::LfnConflict(_) => LFN_CONFLICT,
        BookError::UnknownLfn(_) => UNKNOWN_LFN,
        BookError::NotPending(_) => NOT_PENDING,
        BookError::ChecksumMismatch(_) => CHECKSUM_MISMATCH,
        BookError::RejectedDataset(_) => REJECTED_DATASET,
        BookError::Store(_) => INTERNAL,
    }
}

impl From<BookError> for Fault {
    fn from(e: BookError) -> Self {
        Fault(book_fault_code(&e), e.to_string())
    }
}

impl From<RepoError> for Fault {
    fn from(e: RepoError) -> Self {
        let code = match &e {
            RepoError::UnknownPackage(_) => UNKNOWN_PACKAGE,
            RepoError::MissingDependency { .. } => MISSING_DEPENDENCY,
            RepoError::DuplicateVersion(_) => DUPLICATE_VERSION,
            RepoError::CyclicDependency(_) => CYCLIC_DEPENDENCY,
            RepoError::ChecksumMismatch(_) => CHECKSUM_MISMATCH,
            RepoError::InvalidName(_) => INVALID_PARAMETERS,
            RepoError::Store(_) => INTERNAL,
        };
        Fault(code, e.to_string())
    }
}

/// Positional parameter access with arity checking.
struct Params<'a>(&'a RpcCall);

impl<'a> Params<'a> {
    fn arity(&self, min: usize, max: usize) -> Result<(), Fault> {
        let n = self.0.params.len();
        if n < min || n > max {
            return Err(Fault(
                BAD_REQUEST,
                format!("{} takes {min}..={max} parameters, got {n}", self.0.method),
            ));
        }
        Ok(())
    }

    fn value(&self, i: usize) -> &'a RpcValue {
        &self.0.params[i]
    }

    fn str(&self, i: usize) -> Result<&'a str, Fault> {
        self.0.params[i]
            .as_str()
            .ok_or_else(|| Fault(BAD_REQUEST, format!("parameter {i} must be a string")))
    }

    fn strings(&self, i: usize) -> Result<Vec<String>, Fault> {
        let arr = self.0.params[i]
            .as_array()
            .ok_or_else(|| Fault(BAD_REQUEST, format!("parameter {i} must be an array")))?;
        arr.iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Fault(BAD_REQUEST, "array items must be strings".into()))
            })
            .collect()
    }
}

impl Services {
    pub fn dispatch(&self, kind: ServiceKind, call: &RpcCall) -> RpcReply {
        let result = match kind {
            ServiceKind::Production => self.production_call(call),
            ServiceKind::Monitoring => self.monitoring_call(call),
            ServiceKind::Bookkeeping => self.bookkeeping_call(call),
            ServiceKind::Software => self.software_call(call),
        };
        match result {
            Ok(v) => RpcReply::Value(v),
            Err(Fault(code, message)) => RpcReply::Fault { code, message },
        }
    }

    /// Decodes a request body, dispatches it and encodes the reply.
    pub fn handle_bytes(&self, kind: ServiceKind, body: &[u8]) -> Vec<u8> {
        let reply = match decode_call(body) {
            Ok(call) => self.dispatch(kind, &call),
            Err(e) => RpcReply::Fault {
                code: BAD_REQUEST,
                message: e.to_string(),
            },
        };
        encode_reply(&reply).unwrap_or_else(|e| {
            let fallback = RpcReply::Fault {
                code: INTERNAL,
                message: format!("reply not encodable: {e}"),
            };
            encode_reply(&fallback).expect("plain fault encodes")
        })
    }

    fn production_call(&self, call: &RpcCall) -> Handled {
        let p = Params(call);
        let prod = &self.production;
        match call.method.as_str() {
            "defineWorkflow" => {
                p.arity(1, 1)?;
                let wf = workflow_from_xml(p.str(0)?.as_bytes())?;
                Ok(prod.define_workflow(wf)?.to_string().into())
            }
            "getWorkflow" => {
                p.arity(1, 1)?;
                let wf = prod.get_workflow(&WorkflowId::new(p.str(0)?))?;
                Ok(String::from_utf8(workflow_to_xml(&wf)?).unwrap_or_default().into())
            }
            "createRun" => {
                p.arity(1, 1)?;
                let req = wire::create_run_from_rpc(p.value(0))?;
                let (run_id, count) = prod.create_run(&req)?;
                Ok(crate::protocol::StructBuilder::new()
                    .set("run_id", run_id.as_str())
                    .set("job_count", count as i32)
                    .build())
            }
            "requestJob" => {
                p.arity(1, 1)?;
                let cap = wire::capability_from_rpc(p.value(0))?;
                match prod.request_job(&cap)? {
                    Some(job) => Ok(String::from_utf8(job_to_xml(&job)?).unwrap_or_default().into()),
                    None => Ok("".into()),
                }
            }
            "rescheduleJob" => {
                p.arity(2, 3)?;
                let site = if call.params.len() == 3 {
                    Some(SiteId::new(p.str(2)?))
                } else {
                    None
                };
                let state = prod.reschedule(&JobId::new(p.str(0)?), p.str(1)?, site.as_ref())?;
                Ok(state.as_str().into())
            }
            "runStatus" => {
                p.arity(1, 1)?;
                Ok(wire::run_counts_to_rpc(&prod.run_status(&RunId::new(p.str(0)?))?))
            }
            "listRuns" => {
                p.arity(0, 0)?;
                Ok(RpcValue::Array(prod.list_runs()?.iter().map(wire::run_summary_to_rpc).collect()))
            }
            other => Err(unknown_method(other)),
        }
    }

    fn monitoring_call(&self, call: &RpcCall) -> Handled {
        let p = Params(call);
        match call.method.as_str() {
            "reportStatus" => {
                p.arity(1, 1)?;
                let m = wire::status_from_rpc(p.value(0))?;
                self.monitoring.report_status(&m)?;
                Ok(true.into())
            }
            "jobHistory" => {
                p.arity(1, 1)?;
                let h = self.monitoring.job_history(&JobId::new(p.str(0)?))?;
                Ok(RpcValue::Array(h.iter().map(wire::event_to_rpc).collect()))
            }
            "siteSummary" => {
                p.arity(0, 0)?;
                Ok(wire::site_summary_to_rpc(&self.monitoring.site_summary()?))
            }
            other => Err(unknown_method(other)),
        }
    }

    fn bookkeeping_call(&self, call: &RpcCall) -> Handled {
        let p = Params(call);
        let book = &self.bookkeeping;
        let batch = |lfns: &[String], results: Vec<Result<(), BookError>>| {
            RpcValue::Array(
                lfns.iter()
                    .zip(results)
                    .map(|(lfn, r)| wire::item_result_to_rpc(lfn, r.map_err(|e| (book_fault_code(&e), e.to_string()))))
                    .collect(),
            )
        };
        match call.method.as_str() {
            "registerDataset" => {
                p.arity(1, 1)?;
                book.register_dataset_xml(p.str(0)?.as_bytes())?;
                Ok(true.into())
            }
            "approveDatasets" => {
                p.arity(1, 1)?;
                let lfns = p.strings(0)?;
                let results = book.approve(&lfns)?;
                Ok(batch(&lfns, results))
            }
            "rejectDatasets" => {
                p.arity(2, 2)?;
                let lfns = p.strings(0)?;
                let results = book.reject(&lfns, p.str(1)?)?;
                Ok(batch(&lfns, results))
            }
            "addReplica" => {
                p.arity(1, 1)?;
                book.add_replica(wire::replica_from_rpc(p.value(0))?)?;
                Ok(true.into())
            }
            "queryDatasets" => {
                p.arity(1, 1)?;
                let q = wire::query_from_rpc(p.value(0))?;
                let rows = book.query_datasets(&q)?;
                Ok(RpcValue::Array(rows.iter().map(|(d, r)| wire::dataset_to_rpc(d, r)).collect()))
            }
            "catalogCounts" => {
                p.arity(0, 0)?;
                Ok(wire::counts_to_rpc(&book.counts()?))
            }
            other => Err(unknown_method(other)),
        }
    }

    fn software_call(&self, call: &RpcCall) -> Handled {
        let p = Params(call);
        let repo = &self.software;
        match call.method.as_str() {
            "publishPackage" => {
                p.arity(1, 1)?;
                repo.publish(&wire::package_from_rpc(p.value(0))?)?;
                Ok(true.into())
            }
            "fetchPackage" => {
                p.arity(2, 2)?;
                let sw = crate::model::SoftwareRef::new(p.str(0)?, p.str(1)?);
                Ok(wire::package_to_rpc(&repo.fetch(&sw)?))
            }
            "queryAvailable" => {
                p.arity(0, 0)?;
                Ok(RpcValue::Array(repo.query_available()?.iter().map(wire::package_info_to_rpc).collect()))
            }
            "resolveDeps" => {
                p.arity(2, 2)?;
                let sw = crate::model::SoftwareRef::new(p.str(0)?, p.str(1)?);
                Ok(wire::software_list_to_rpc(&repo.resolve_deps(&sw)?))
            }
            other => Err(unknown_method(other)),
        }
    }
}

fn unknown_method(name: &str) -> Fault {
    Fault(UNKNOWN_METHOD, format!("unknown method {name}"))
}
