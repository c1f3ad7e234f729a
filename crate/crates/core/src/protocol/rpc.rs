//! XML-RPC subset: `int`, `double`, `string`, `boolean`, `array` and `struct`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::xml::{self, Element};
use super::ProtocolError;

/// Maximum container nesting of a value; a scalar has depth 1.
pub const MAX_VALUE_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum RpcValue {
    Int(i32),
    Double(f64),
    Str(String),
    Bool(bool),
    Array(Vec<RpcValue>),
    Struct(BTreeMap<String, RpcValue>),
}

impl RpcValue {
    pub fn depth(&self) -> usize {
        match self {
            RpcValue::Array(items) => 1 + items.iter().map(RpcValue::depth).max().unwrap_or(0),
            RpcValue::Struct(members) => 1 + members.values().map(RpcValue::depth).max().unwrap_or(0),
            _ => 1,
        }
    }

    pub fn str(s: impl Into<String>) -> Self {
        RpcValue::Str(s.into())
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            RpcValue::Int(_) => "int",
            RpcValue::Double(_) => "double",
            RpcValue::Str(_) => "string",
            RpcValue::Bool(_) => "boolean",
            RpcValue::Array(_) => "array",
            RpcValue::Struct(_) => "struct",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            RpcValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i32> {
        match self {
            RpcValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_double(&self) -> Option<f64> {
        match self {
            RpcValue::Double(d) => Some(*d),
            RpcValue::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            RpcValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[RpcValue]> {
        match self {
            RpcValue::Array(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_struct(&self) -> Option<&BTreeMap<String, RpcValue>> {
        match self {
            RpcValue::Struct(m) => Some(m),
            _ => None,
        }
    }
}

impl From<&str> for RpcValue {
    fn from(s: &str) -> Self {
        RpcValue::Str(s.to_string())
    }
}

impl From<String> for RpcValue {
    fn from(s: String) -> Self {
        RpcValue::Str(s)
    }
}

impl From<bool> for RpcValue {
    fn from(b: bool) -> Self {
        RpcValue::Bool(b)
    }
}

impl From<i32> for RpcValue {
    fn from(i: i32) -> Self {
        RpcValue::Int(i)
    }
}

impl From<f64> for RpcValue {
    fn from(d: f64) -> Self {
        RpcValue::Double(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpcCall {
    pub method: String,
    pub params: Vec<RpcValue>,
}

impl RpcCall {
    pub fn new(method: impl Into<String>, params: Vec<RpcValue>) -> Self {
        RpcCall {
            method: method.into(),
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RpcReply {
    Value(RpcValue),
    Fault { code: i32, message: String },
}

pub fn is_valid_method_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | ':' | '/'))
}

const XML_DECL: &str = "<?xml version=\"1.0\"?>";

pub fn encode_call(call: &RpcCall) -> Result<Vec<u8>, ProtocolError> {
    if !is_valid_method_name(&call.method) {
        return Err(ProtocolError::InvalidMethodName(call.method.clone()));
    }
    let mut out = String::from(XML_DECL);
    out.push_str("<methodCall><methodName>");
    out.push_str(&call.method);
    out.push_str("</methodName><params>");
    for p in &call.params {
        out.push_str("<param>");
        write_value(&mut out, p)?;
        out.push_str("</param>");
    }
    out.push_str("</params></methodCall>");
    Ok(out.into_bytes())
}

pub fn encode_reply(reply: &RpcReply) -> Result<Vec<u8>, ProtocolError> {
    let mut out = String::from(XML_DECL);
    out.push_str("<methodResponse>");
    match reply {
        RpcReply::Value(v) => {
            out.push_str("<params><param>");
            write_value(&mut out, v)?;
            out.push_str("</param></params>");
        }
        RpcReply::Fault { code, message } => {
            let mut fault = BTreeMap::new();
            fault.insert("faultCode".to_string(), RpcValue::Int(*code));
            fault.insert("faultString".to_string(), RpcValue::Str(message.clone()));
            out.push_str("<fault>");
            write_value(&mut out, &RpcValue::Struct(fault))?;
            out.push_str("</fault>");
        }
    }
    out.push_str("</methodResponse>");
    Ok(out.into_bytes())
}

fn write_value(out: &mut String, v: &RpcValue) -> Result<(), ProtocolError> {
    if v.depth() > MAX_VALUE_DEPTH {
        return Err(ProtocolError::DepthExceeded);
    }
    write_value_unchecked(out, v)
}

fn write_value_unchecked(out: &mut String, v: &RpcValue) -> Result<(), ProtocolError> {
    out.push_str("<value>");
    match v {
        RpcValue::Int(i) => {
            let _ = write!(out, "<int>{i}</int>");
        }
        RpcValue::Double(d) => {
            if !d.is_finite() {
                return Err(ProtocolError::UnsupportedType("non-finite double".into()));
            }
            let _ = write!(out, "<double>{d}</double>");
        }
        RpcValue::Str(s) => {
            out.push_str("<string>");
            xml::escape_into(out, s)?;
            out.push_str("</string>");
        }
        RpcValue::Bool(b) => {
            let _ = write!(out, "<boolean>{}</boolean>", *b as u8);
        }
        RpcValue::Array(items) => {
            out.push_str("<array><data>");
            for item in items {
                write_value_unchecked(out, item)?;
            }
            out.push_str("</data></array>");
        }
        RpcValue::Struct(members) => {
            out.push_str("<struct>");
            for (name, value) in members {
                out.push_str("<member><name>");
                xml::escape_into(out, name)?;
                out.push_str("</name>");
                write_value_unchecked(out, value)?;
                out.push_str("</member>");
            }
            out.push_str("</struct>");
        }
    }
    out.push_str("</value>");
    Ok(())
}

pub fn decode_call(bytes: &[u8]) -> Result<RpcCall, ProtocolError> {
    let root = xml::parse(bytes)?;
    root.expect_name("methodCall")?;
    let name = root.require("methodName")?.leaf_text()?.trim().to_string();
    if !is_valid_method_name(&name) {
        return Err(ProtocolError::InvalidMethodName(name));
    }
    let mut params = Vec::new();
    if let Some(p) = root.child("params") {
        for param in &p.children {
            param.expect_name("param")?;
            params.push(single_value(param)?);
        }
    }
    for c in &root.children {
        if c.name != "methodName" && c.name != "params" {
            return Err(ProtocolError::MalformedDocument(format!("unexpected <{}>", c.name)));
        }
    }
    Ok(RpcCall { method: name, params })
}

pub fn decode_reply(bytes: &[u8]) -> Result<RpcReply, ProtocolError> {
    let root = xml::parse(bytes)?;
    root.expect_name("methodResponse")?;
    if root.children.len() != 1 {
        return Err(ProtocolError::MalformedDocument(
            "methodResponse needs exactly one of <params> or <fault>".into(),
        ));
    }
    let body = &root.children[0];
    match body.name.as_str() {
        "params" => {
            if body.children.len() != 1 {
                return Err(ProtocolError::MalformedDocument(
                    "a response carries exactly one param".into(),
                ));
            }
            let param = &body.children[0];
            param.expect_name("param")?;
            Ok(RpcReply::Value(single_value(param)?))
        }
        "fault" => {
            let v = single_value(body)?;
            let members = v
                .as_struct()
                .ok_or_else(|| ProtocolError::MalformedDocument("fault must be a struct".into()))?;
            let code = members
                .get("faultCode")
                .and_then(RpcValue::as_int)
                .ok_or_else(|| ProtocolError::MissingField("faultCode".into()))?;
            let message = members
                .get("faultString")
                .and_then(RpcValue::as_str)
                .ok_or_else(|| ProtocolError::MissingField("faultString".into()))?
                .to_string();
            if members.len() != 2 {
                return Err(ProtocolError::MalformedDocument("unexpected fault members".into()));
            }
            Ok(RpcReply::Fault { code, message })
        }
        other => Err(ProtocolError::MalformedDocument(format!("unexpected <{other}>"))),
    }
}

fn single_value(parent: &Element) -> Result<RpcValue, ProtocolError> {
    match parent.children.as_slice() {
        [v] => decode_value(v, 1),
        _ => Err(ProtocolError::MalformedDocument(format!(
            "<{}> must hold exactly one <value>",
            parent.name
        ))),
    }
}

fn decode_value(el: &Element, depth: usize) -> Result<RpcValue, ProtocolError> {
    el.expect_name("value")?;
    if depth > MAX_VALUE_DEPTH {
        return Err(ProtocolError::DepthExceeded);
    }
    let typed = match el.children.as_slice() {
        // Untyped values are strings.
        [] => return Ok(RpcValue::Str(el.text.clone())),
        [t] => t,
        _ => {
            return Err(ProtocolError::MalformedDocument(
                "<value> holds more than one element".into(),
            ))
        }
    };
    match typed.name.as_str() {
        "int" | "i4" => {
            let t = typed.leaf_text()?.trim();
            t.parse::<i32>()
                .map(RpcValue::Int)
                .map_err(|_| ProtocolError::MalformedDocument(format!("bad int {t:?}")))
        }
        "double" => {
            let t = typed.leaf_text()?.trim();
            match t.parse::<f64>() {
                Ok(d) if d.is_finite() && is_plain_number(t) => Ok(RpcValue::Double(d)),
                _ => Err(ProtocolError::MalformedDocument(format!("bad double {t:?}"))),
            }
        }
        "string" => Ok(RpcValue::Str(typed.leaf_text()?.to_string())),
        "boolean" => match typed.leaf_text()?.trim() {
            "0" => Ok(RpcValue::Bool(false)),
            "1" => Ok(RpcValue::Bool(true)),
            t => Err(ProtocolError::MalformedDocument(format!("bad boolean {t:?}"))),
        },
        "array" => {
            let data = match typed.children.as_slice() {
                [d] if d.name == "data" => d,
                _ => return Err(ProtocolError::MalformedDocument("<array> needs one <data>".into())),
            };
            data.children
                .iter()
                .map(|v| decode_value(v, depth + 1))
                .collect::<Result<Vec<_>, _>>()
                .map(RpcValue::Array)
        }
        "struct" => {
            let mut members = BTreeMap::new();
            for m in &typed.children {
                m.expect_name("member")?;
                let (name, value) = match m.children.as_slice() {
                    [n, v] if n.name == "name" => (n.leaf_text()?.to_string(), v),
                    _ => {
                        return Err(ProtocolError::MalformedDocument(
                            "<member> needs <name> then <value>".into(),
                        ))
                    }
                };
                let value = decode_value(value, depth + 1)?;
                if members.insert(name.clone(), value).is_some() {
                    return Err(ProtocolError::MalformedDocument(format!(
                        "duplicate struct member {name:?}"
                    )));
                }
            }
            Ok(RpcValue::Struct(members))
        }
        other => Err(ProtocolError::UnsupportedType(other.to_string())),
    }
}

fn is_plain_number(t: &str) -> bool {
    // Rejects "inf", "NaN" and exponents, which XML-RPC does not allow.
    !t.is_empty() && t.chars().all(|c| c.is_ascii_digit() || c == '.' || c == '-' || c == '+')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strukt(pairs: &[(&str, RpcValue)]) -> RpcValue {
        RpcValue::Struct(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect())
    }

    #[test]
    fn request_job_round_trip() {
        let call = RpcCall::new(
            "requestJob",
            vec![strukt(&[("site", "A".into()), ("cpu_power", RpcValue::Double(1.5))])],
        );
        let bytes = encode_call(&call).unwrap();
        assert_eq!(decode_call(&bytes).unwrap(), call);
    }

    #[test]
    fn call_wire_shape() {
        let call = RpcCall::new("m.x", vec![RpcValue::Int(7), RpcValue::Bool(true)]);
        let bytes = encode_call(&call).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "<?xml version=\"1.0\"?><methodCall><methodName>m.x</methodName><params>\
             <param><value><int>7</int></value></param>\
             <param><value><boolean>1</boolean></value></param></params></methodCall>"
        );
    }

    #[test]
    fn struct_keys_are_sorted() {
        let v = strukt(&[("b", RpcValue::Int(1)), ("a", RpcValue::Int(2))]);
        let bytes = encode_reply(&RpcReply::Value(v)).unwrap();
        let s = String::from_utf8(bytes).unwrap();
        assert!(s.find("<name>a</name>").unwrap() < s.find("<name>b</name>").unwrap());
    }

    #[test]
    fn base64_is_unsupported() {
        let doc = b"<methodCall><methodName>x</methodName><params><param><value><base64>AAAA</base64></value></param></params></methodCall>";
        assert_eq!(
            decode_call(doc),
            Err(ProtocolError::UnsupportedType("base64".into()))
        );
    }

    #[test]
    fn fault_round_trip() {
        let r = RpcReply::Fault {
            code: 404,
            message: "no job".into(),
        };
        assert_eq!(decode_reply(&encode_reply(&r).unwrap()).unwrap(), r);
    }

    #[test]
    fn empty_array_round_trip() {
        let r = RpcReply::Value(RpcValue::Array(vec![]));
        assert_eq!(decode_reply(&encode_reply(&r).unwrap()).unwrap(), r);
    }

    #[test]
    fn accepts_untyped_strings_and_whitespace() {
        let doc = b"<?xml version=\"1.0\"?>\n<methodCall>\n  <methodName>echo</methodName>\n  <params>\n    <param>\n      <value>  hi  </value>\n    </param>\n    <param><value>\n <i4>-3</i4>\n</value></param>\n  </params>\n</methodCall>\n";
        let call = decode_call(doc).unwrap();
        assert_eq!(call.params, vec![RpcValue::str("  hi  "), RpcValue::Int(-3)]);
    }

    #[test]
    fn depth_limits() {
        let mut v = RpcValue::Int(1);
        for _ in 1..MAX_VALUE_DEPTH {
            v = RpcValue::Array(vec![v]);
        }
        assert_eq!(v.depth(), MAX_VALUE_DEPTH);
        let call = RpcCall::new("deep", vec![v.clone()]);
        let bytes = encode_call(&call).unwrap();
        assert_eq!(decode_call(&bytes).unwrap(), call);

        let too_deep = RpcValue::Array(vec![v]);
        assert_eq!(
            encode_call(&RpcCall::new("deep", vec![too_deep.clone()])),
            Err(ProtocolError::DepthExceeded)
        );
        // Build the over-deep document by hand and decode it.
        let mut doc = String::from("<methodCall><methodName>deep</methodName><params><param>");
        let mut inner = String::new();
        write_value_unchecked(&mut inner, &too_deep).unwrap();
        doc.push_str(&inner);
        doc.push_str("</param></params></methodCall>");
        assert_eq!(decode_call(doc.as_bytes()), Err(ProtocolError::DepthExceeded));
    }

    #[test]
    fn rejects_malformed_values() {
        let cases: &[&[u8]] = &[
            b"<methodCall><methodName>1bad</methodName></methodCall>",
            b"<methodCall><methodName>x</methodName><params><param><value><int>9999999999</int></value></param></params></methodCall>",
            b"<methodCall><methodName>x</methodName><params><param><value><double>inf</double></value></param></params></methodCall>",
            b"<methodCall><methodName>x</methodName><params><param><value><boolean>2</boolean></value></param></params></methodCall>",
            b"<methodCall><methodName>x</methodName><params><param><value><struct><member><name>a</name><value>1</value></member><member><name>a</name><value>2</value></member></struct></value></param></params></methodCall>",
            b"<methodResponse><params><param><value>1</value></param><param><value>2</value></param></params></methodResponse>",
            b"<methodResponse></methodResponse>",
        ];
        for c in cases {
            assert!(decode_call(c).is_err() && decode_reply(c).is_err(), "{}", String::from_utf8_lossy(c));
        }
    }

    #[test]
    fn doubles_round_trip_exactly() {
        for d in [0.1, -2.5e-300, 1.7976931348623157e308, 5e-324, 123_456_789.123_456_79, -0.0] {
            let r = RpcReply::Value(RpcValue::Double(d));
            match decode_reply(&encode_reply(&r).unwrap()).unwrap() {
                RpcReply::Value(RpcValue::Double(back)) => assert_eq!(back.to_bits(), d.to_bits()),
                other => panic!("{other:?}"),
            }
        }
    }
}
