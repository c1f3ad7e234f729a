//! Helpers for building and reading XML-RPC structs.
//!
//! Integers wider than 32 bits travel as decimal strings.

use std::collections::BTreeMap;
use std::str::FromStr;

use super::rpc::RpcValue;
use super::ProtocolError;

#[derive(Default)]
pub struct StructBuilder {
    members: BTreeMap<String, RpcValue>,
}

impl StructBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<RpcValue>) -> Self {
        self.members.insert(name.to_string(), value.into());
        self
    }

    pub fn set_u64(self, name: &str, value: u64) -> Self {
        self.set(name, value.to_string())
    }

    pub fn set_opt(self, name: &str, value: Option<impl Into<RpcValue>>) -> Self {
        match value {
            Some(v) => self.set(name, v),
            None => self,
        }
    }

    pub fn build(self) -> RpcValue {
        RpcValue::Struct(self.members)
    }
}

pub struct StructReader<'a> {
    members: &'a BTreeMap<String, RpcValue>,
}

impl<'a> StructReader<'a> {
    pub fn new(value: &'a RpcValue) -> Result<Self, ProtocolError> {
        value
            .as_struct()
            .map(|members| StructReader { members })
            .ok_or_else(|| {
                ProtocolError::MalformedDocument(format!("expected struct, got {}", value.type_name()))
            })
    }

    pub fn get(&self, name: &str) -> Result<&'a RpcValue, ProtocolError> {
        self.members
            .get(name)
            .ok_or_else(|| ProtocolError::MissingField(name.to_string()))
    }

    pub fn opt(&self, name: &str) -> Option<&'a RpcValue> {
        self.members.get(name)
    }

    pub fn str(&self, name: &str) -> Result<&'a str, ProtocolError> {
        let v = self.get(name)?;
        v.as_str().ok_or_else(|| wrong_type(name, "string", v))
    }

    pub fn opt_str(&self, name: &str) -> Result<Option<&'a str>, ProtocolError> {
        match self.opt(name) {
            None => Ok(None),
            Some(v) => v.as_str().map(Some).ok_or_else(|| wrong_type(name, "string", v)),
        }
    }

    pub fn int(&self, name: &str) -> Result<i32, ProtocolError> {
        let v = self.get(name)?;
        v.as_int().ok_or_else(|| wrong_type(name, "int", v))
    }

    pub fn opt_int(&self, name: &str) -> Result<Option<i32>, ProtocolError> {
        match self.opt(name) {
            None => Ok(None),
            Some(v) => v.as_int().map(Some).ok_or_else(|| wrong_type(name, "int", v)),
        }
    }

    pub fn double(&self, name: &str) -> Result<f64, ProtocolError> {
        let v = self.get(name)?;
        v.as_double().ok_or_else(|| wrong_type(name, "double", v))
    }

    pub fn opt_double(&self, name: &str) -> Result<Option<f64>, ProtocolError> {
        match self.opt(name) {
            None => Ok(None),
            Some(v) => v.as_double().map(Some).ok_or_else(|| wrong_type(name, "double", v)),
        }
    }

    pub fn bool(&self, name: &str) -> Result<bool, ProtocolError> {
        let v = self.get(name)?;
        v.as_bool().ok_or_else(|| wrong_type(name, "boolean", v))
    }

    pub fn array(&self, name: &str) -> Result<&'a [RpcValue], ProtocolError> {
        let v = self.get(name)?;
        v.as_array().ok_or_else(|| wrong_type(name, "array", v))
    }

    /// A number sent either as a decimal string or as an int.
    pub fn parse<T: FromStr>(&self, name: &str) -> Result<T, ProtocolError> {
        let v = self.get(name)?;
        let text = match v {
            RpcValue::Str(s) => s.clone(),
            RpcValue::Int(i) => i.to_string(),
            _ => return Err(wrong_type(name, "string", v)),
        };
        text.trim()
            .parse()
            .map_err(|_| ProtocolError::MalformedDocument(format!("member {name}: bad number {text:?}")))
    }

    pub fn opt_parse<T: FromStr>(&self, name: &str) -> Result<Option<T>, ProtocolError> {
        match self.opt(name) {
            None => Ok(None),
            Some(_) => self.parse(name).map(Some),
        }
    }
}

fn wrong_type(name: &str, expected: &str, got: &RpcValue) -> ProtocolError {
    ProtocolError::MalformedDocument(format!(
        "member {name}: expected {expected}, got {}",
        got.type_name()
    ))
}
