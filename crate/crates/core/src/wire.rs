//! Framed messages exchanged between executor clients, interchanges,
//! managers and workers.
//!
//! A frame is a 4-byte big-endian length followed by a codec-encoded map
//! that always carries a `type` string.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::app::AppSpec;
use crate::codec::{self, DecodeError, EncodeError};
use crate::future::Outcome;
use crate::task::TaskError;
use crate::value::{Kwargs, TaskId, Value};

pub const MAX_FRAME: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Register,
    Heartbeat,
    TaskBatch,
    ResultBatch,
    Cmd,
    CmdReply,
    ManagerLost,
}

impl MsgType {
    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Register => "REGISTER",
            MsgType::Heartbeat => "HEARTBEAT",
            MsgType::TaskBatch => "TASK_BATCH",
            MsgType::ResultBatch => "RESULT_BATCH",
            MsgType::Cmd => "CMD",
            MsgType::CmdReply => "CMD_REPLY",
            MsgType::ManagerLost => "MANAGER_LOST",
        }
    }

    pub fn parse(s: &str) -> Option<MsgType> {
        Some(match s {
            "REGISTER" => MsgType::Register,
            "HEARTBEAT" => MsgType::Heartbeat,
            "TASK_BATCH" => MsgType::TaskBatch,
            "RESULT_BATCH" => MsgType::ResultBatch,
            "CMD" => MsgType::Cmd,
            "CMD_REPLY" => MsgType::CmdReply,
            "MANAGER_LOST" => MsgType::ManagerLost,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection closed")]
    Eof,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MsgType,
    pub fields: BTreeMap<String, Value>,
}

impl Message {
    pub fn new(kind: MsgType) -> Self {
        Message {
            kind,
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.fields.insert(key.to_string(), value.into());
        self
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.fields.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.fields.get(key)
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        self.get(key).and_then(Value::as_int)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(Value::as_str)
    }

    pub fn require_str(&self, key: &str) -> Result<&str, WireError> {
        self.str(key)
            .ok_or_else(|| WireError::Malformed(format!("{} without `{key}`", self.kind.as_str())))
    }

    pub fn to_value(&self) -> Value {
        let mut m = self.fields.clone();
        m.insert("type".into(), Value::str(self.kind.as_str()));
        Value::Map(m)
    }

    pub fn from_value(v: Value) -> Result<Message, WireError> {
        let Value::Map(mut m) = v else {
            return Err(WireError::Malformed("frame is not a map".into()));
        };
        let kind = match m.remove("type") {
            Some(Value::Str(s)) => MsgType::parse(&s)
                .ok_or_else(|| WireError::Malformed(format!("unknown type {s}")))?,
            _ => return Err(WireError::Malformed("frame without type".into())),
        };
        Ok(Message { kind, fields: m })
    }

    /// Length-prefixed frame bytes.
    pub fn to_frame(&self) -> Result<Vec<u8>, WireError> {
        let mut out = vec![0u8; 4];
        codec::encode_into(&self.to_value(), &mut out)?;
        let len = out.len() - 4;
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        out[..4].copy_from_slice(&(len as u32).to_be_bytes());
        Ok(out)
    }
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<(), WireError> {
    w.write_all(&msg.to_frame()?)?;
    Ok(())
}

/// Reads one frame. A clean close before the first length byte is `Eof`.
pub fn read_message(r: &mut impl Read) -> Result<Message, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Eof),
            Ok(0) => return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Message::from_value(codec::decode(&body)?)
}

/// Task half of a batch entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPayload {
    pub attempt: u32,
    pub app: AppSpec,
    pub args: Vec<Value>,
    pub kwargs: Kwargs,
}

impl TaskPayload {
    pub fn to_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("app".into(), self.app.to_value());
        m.insert("args".into(), Value::List(self.args.clone()));
        m.insert("attempt".into(), Value::Int(self.attempt as i64));
        m.insert("kwargs".into(), Value::Map(self.kwargs.clone()));
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Result<TaskPayload, WireError> {
        let bad = || WireError::Malformed("bad task payload".into());
        let m = v.as_map().ok_or_else(bad)?;
        Ok(TaskPayload {
            attempt: m.get("attempt").and_then(Value::as_int).ok_or_else(bad)? as u32,
            app: m.get("app").and_then(AppSpec::from_value).ok_or_else(bad)?,
            args: m
                .get("args")
                .and_then(Value::as_list)
                .ok_or_else(bad)?
                .to_vec(),
            kwargs: m
                .get("kwargs")
                .and_then(Value::as_map)
                .ok_or_else(bad)?
                .clone(),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        Ok(codec::encode(&self.to_value())?)
    }
}

/// Result half of a batch entry. Times are microseconds since the Unix
/// epoch, as seen by the worker.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultPayload {
    pub attempt: u32,
    pub outcome: Outcome,
    pub start_us: u64,
    pub end_us: u64,
    pub worker: String,
}

impl ResultPayload {
    pub fn to_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("attempt".into(), Value::Int(self.attempt as i64));
        match &self.outcome {
            Ok(v) => m.insert("ok".into(), v.clone()),
            Err(e) => m.insert("err".into(), e.to_value()),
        };
        m.insert("start_us".into(), Value::Int(self.start_us as i64));
        m.insert("end_us".into(), Value::Int(self.end_us as i64));
        m.insert("worker".into(), Value::str(&self.worker));
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Result<ResultPayload, WireError> {
        let bad = || WireError::Malformed("bad result payload".into());
        let m = v.as_map().ok_or_else(bad)?;
        let outcome = match (m.get("ok"), m.get("err")) {
            (Some(v), None) => Ok(v.clone()),
            (None, Some(e)) => Err(TaskError::from_value(e).ok_or_else(bad)?),
            _ => return Err(bad()),
        };
        Ok(ResultPayload {
            attempt: m.get("attempt").and_then(Value::as_int).ok_or_else(bad)? as u32,
            outcome,
            start_us: m.get("start_us").and_then(Value::as_int).ok_or_else(bad)? as u64,
            end_us: m.get("end_us").and_then(Value::as_int).ok_or_else(bad)? as u64,
            worker: m
                .get("worker")
                .and_then(Value::as_str)
                .ok_or_else(bad)?
                .to_string(),
        })
    }

    /// Encodes the payload; a result that cannot be encoded becomes a
    /// serialization error so the caller always hears back.
    pub fn encode(&self) -> Vec<u8> {
        match codec::encode(&self.to_value()) {
            Ok(b) => b,
            Err(e) => {
                let fallback = ResultPayload {
                    outcome: Err(TaskError::Serialization(e.to_string())),
                    ..self.clone()
                };
                codec::encode(&fallback.to_value()).expect("error payloads always encode")
            }
        }
    }
}

/// `[Int id, Bytes payload]` batch entry.
pub fn entry(id: TaskId, payload: Vec<u8>) -> Value {
    Value::List(vec![Value::Int(id.0 as i64), Value::Bytes(payload)])
}

pub fn parse_entry(v: &Value) -> Result<(TaskId, &[u8]), WireError> {
    match v.as_list() {
        Some([Value::Int(id), Value::Bytes(b)]) => Ok((TaskId(*id as u64), b.as_slice())),
        _ => Err(WireError::Malformed("bad batch entry".into())),
    }
}

/// Entries of a TASK_BATCH or RESULT_BATCH.
pub fn batch_entries(msg: &Message) -> Result<&[Value], WireError> {
    msg.get("tasks")
        .or_else(|| msg.get("results"))
        .and_then(Value::as_list)
        .ok_or_else(|| WireError::Malformed(format!("{} without entries", msg.kind.as_str())))
}
