//! Wire formats: the XML-RPC subset spoken between agents and the central
//! services, and the job, dataset and workflow XML documents.

mod documents;
mod fields;
mod rpc;
pub(crate) mod xml;

use thiserror::Error;

pub use documents::{
    dataset_from_xml, dataset_to_xml, format_checksum, job_from_xml, job_to_xml, parse_checksum,
    workflow_from_xml, workflow_to_xml,
};
pub use fields::{StructBuilder, StructReader};
pub use rpc::{
    decode_call, decode_reply, encode_call, encode_reply, is_valid_method_name, RpcCall, RpcReply,
    RpcValue, MAX_VALUE_DEPTH,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unsupported type <{0}>")]
    UnsupportedType(String),
    #[error("value nesting exceeds the depth limit")]
    DepthExceeded,
    #[error("missing field {0}")]
    MissingField(String),
    #[error("text contains a character that XML cannot carry")]
    InvalidText,
    #[error("invalid method name {0:?}")]
    InvalidMethodName(String),
}
