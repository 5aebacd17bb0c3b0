//! Messages exchanged across an execution boundary, and the per-call log.
//!
//! Requests and responses are single JSON objects with a fixed field order.
//! Vector components are written with 17 significant digits so that every
//! finite `f64` survives a round trip bit for bit; timestamps are integer
//! nanoseconds since the Unix epoch.

mod record;

pub use self::record::{
    log_path, read_log_file, read_log_records, CallRecord, LogError, LogReadout, LogSink,
};

use std::fmt::Write as _;

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("cannot encode `{field}`: component {index} is not finite")]
    NonFinite { field: &'static str, index: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` must be {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub initial_guess: Vec<f64>,
    pub sent_at_unix_ns: u64,
    pub call_index: u64,
    pub iterations: u64,
    pub system_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireResponse {
    pub result: Vec<f64>,
    pub received_at_unix_ns: u64,
    pub op_start_unix_ns: u64,
    pub op_end_unix_ns: u64,
    pub worker_id: String,
    /// Worker ids of the relays traversed, outermost first. Empty for a
    /// direct call.
    pub relay_path: Vec<String>,
}

impl WireResponse {
    pub fn operation_ns(&self) -> u64 {
        self.op_end_unix_ns.saturating_sub(self.op_start_unix_ns)
    }
}

fn write_vector(out: &mut String, field: &'static str, v: &[f64]) -> Result<(), WireError> {
    out.push('[');
    for (index, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(WireError::NonFinite { field, index });
        }
        if index > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x:.16e}");
    }
    out.push(']');
    Ok(())
}

fn write_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

pub fn encode_request(req: &WireRequest) -> Result<Vec<u8>, WireError> {
    let mut out = String::with_capacity(192);
    out.push_str("{\"initial_guess\":");
    write_vector(&mut out, "initial_guess", &req.initial_guess)?;
    let _ = write!(
        out,
        ",\"sent_at_unix_ns\":{},\"call_index\":{},\"iterations\":{},\"system_id\":",
        req.sent_at_unix_ns, req.call_index, req.iterations
    );
    write_str(&mut out, &req.system_id);
    out.push('}');
    Ok(out.into_bytes())
}

pub fn encode_response(resp: &WireResponse) -> Result<Vec<u8>, WireError> {
    let mut out = String::with_capacity(256);
    out.push_str("{\"result\":");
    write_vector(&mut out, "result", &resp.result)?;
    let _ = write!(
        out,
        ",\"received_at_unix_ns\":{},\"op_start_unix_ns\":{},\"op_end_unix_ns\":{},\"worker_id\":",
        resp.received_at_unix_ns, resp.op_start_unix_ns, resp.op_end_unix_ns
    );
    write_str(&mut out, &resp.worker_id);
    if !resp.relay_path.is_empty() {
        out.push_str(",\"relay_path\":[");
        for (i, hop) in resp.relay_path.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_str(&mut out, hop);
        }
        out.push(']');
    }
    out.push('}');
    Ok(out.into_bytes())
}

fn parse_object(bytes: &[u8]) -> Result<Map<String, Value>, WireError> {
    match serde_json::from_slice::<Value>(bytes) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(WireError::Malformed("expected a JSON object".into())),
        Err(e) => Err(WireError::Malformed(e.to_string())),
    }
}

fn field<'a>(map: &'a Map<String, Value>, name: &'static str) -> Result<&'a Value, WireError> {
    map.get(name).ok_or(WireError::MissingField(name))
}

fn get_u64(map: &Map<String, Value>, name: &'static str) -> Result<u64, WireError> {
    field(map, name)?.as_u64().ok_or(WireError::WrongType {
        field: name,
        expected: "a non-negative integer",
    })
}

fn get_string(map: &Map<String, Value>, name: &'static str) -> Result<String, WireError> {
    field(map, name)?
        .as_str()
        .map(str::to_owned)
        .ok_or(WireError::WrongType {
            field: name,
            expected: "a string",
        })
}

fn get_vector(map: &Map<String, Value>, name: &'static str) -> Result<Vec<f64>, WireError> {
    let wrong = WireError::WrongType {
        field: name,
        expected: "an array of numbers",
    };
    field(map, name)?
        .as_array()
        .ok_or_else(|| wrong.clone())?
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| wrong.clone()))
        .collect()
}

/// Unknown fields are ignored.
pub fn decode_request(bytes: &[u8]) -> Result<WireRequest, WireError> {
    let map = parse_object(bytes)?;
    Ok(WireRequest {
        initial_guess: get_vector(&map, "initial_guess")?,
        sent_at_unix_ns: get_u64(&map, "sent_at_unix_ns")?,
        call_index: get_u64(&map, "call_index")?,
        iterations: get_u64(&map, "iterations")?,
        system_id: get_string(&map, "system_id")?,
    })
}

/// Unknown fields are ignored; a missing `relay_path` decodes as empty.
pub fn decode_response(bytes: &[u8]) -> Result<WireResponse, WireError> {
    let map = parse_object(bytes)?;
    let relay_path = match map.get("relay_path") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str().map(str::to_owned).ok_or(WireError::WrongType {
                    field: "relay_path",
                    expected: "an array of strings",
                })
            })
            .collect::<Result<_, _>>()?,
        Some(_) => {
            return Err(WireError::WrongType {
                field: "relay_path",
                expected: "an array of strings",
            })
        }
    };
    Ok(WireResponse {
        result: get_vector(&map, "result")?,
        received_at_unix_ns: get_u64(&map, "received_at_unix_ns")?,
        op_start_unix_ns: get_u64(&map, "op_start_unix_ns")?,
        op_end_unix_ns: get_u64(&map, "op_end_unix_ns")?,
        worker_id: get_string(&map, "worker_id")?,
        relay_path,
    })
}
