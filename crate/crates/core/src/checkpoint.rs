//! Append-only checkpoint files: the persistent image of the memo table.
//!
//! A file is a sequence of records, each a 4-byte big-endian length followed
//! by a codec-encoded value. The first record is a header map naming the
//! format version and digest algorithm; every following record is a list
//! `[digest, value, timestamp_us]`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::codec::{self, EncodeError};
use crate::memo::{MemoTable, DIGEST_ALGORITHM};
use crate::value::{Kwargs, Value};

pub const FORMAT_NAME: &str = "pilotflow-checkpoint";
pub const FORMAT_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint {path} is corrupt at byte {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

fn header() -> Value {
    let mut m = Kwargs::new();
    m.insert("digest".into(), Value::str(DIGEST_ALGORITHM));
    m.insert("format".into(), Value::str(FORMAT_NAME));
    m.insert("version".into(), Value::Int(FORMAT_VERSION));
    Value::Map(m)
}

fn frame(value: &Value) -> Result<Vec<u8>, EncodeError> {
    let body = codec::encode(value)?;
    let len = u32::try_from(body.len()).map_err(|_| EncodeError::TooLarge(body.len()))?;
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Appends one record per completed task and flushes after each.
pub struct CheckpointWriter {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl CheckpointWriter {
    /// Opens `path` for appending, writing a header if the file is new or
    /// empty.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| CheckpointError::Io {
            path: path.clone(),
            source,
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        let empty = file.metadata().map_err(io)?.len() == 0;
        let mut out = BufWriter::new(file);
        if empty {
            out.write_all(&frame(&header())?).map_err(io)?;
            out.flush().map_err(io)?;
        }
        Ok(CheckpointWriter {
            path,
            out: Mutex::new(out),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(
        &self,
        key: &str,
        value: &Value,
        timestamp_us: u64,
    ) -> Result<(), CheckpointError> {
        let record = frame(&Value::List(vec![
            Value::str(key),
            value.clone(),
            Value::Int(timestamp_us as i64),
        ]))?;
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        let io = |source| CheckpointError::Io {
            path: self.path.clone(),
            source,
        };
        out.write_all(&record).map_err(io)?;
        out.flush().map_err(io)
    }
}

/// One decoded record.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub key: String,
    pub value: Value,
    pub timestamp_us: u64,
}

/// Reads every complete record of one file. A truncated final record is
/// dropped; anything else that fails to parse is an error.
pub fn read_records(path: &Path) -> Result<Vec<CheckpointRecord>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |offset, reason: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let mut records = Vec::new();
    let mut pos = 0usize;
    let mut first = true;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            break;
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if bytes.len() - pos - 4 < len {
            break;
        }
        let body = &bytes[pos + 4..pos + 4 + len];
        let value = codec::decode(body).map_err(|e| corrupt(pos, e.to_string()))?;
        if first {
            check_header(&value).map_err(|reason| corrupt(pos, reason))?;
            first = false;
        } else {
            records
                .push(parse_record(&value).ok_or_else(|| corrupt(pos, "malformed record".into()))?);
        }
        pos += 4 + len;
    }
    Ok(records)
}

fn check_header(value: &Value) -> Result<(), String> {
    let m = value.as_map().ok_or("missing header")?;
    if m.get("format").and_then(Value::as_str) != Some(FORMAT_NAME) {
        return Err("not a checkpoint file".into());
    }
    match m.get("version").and_then(Value::as_int) {
        Some(FORMAT_VERSION) => {}
        other => return Err(format!("unsupported version {other:?}")),
    }
    match m.get("digest").and_then(Value::as_str) {
        Some(DIGEST_ALGORITHM) => Ok(()),
        other => Err(format!("unsupported digest {other:?}")),
    }
}

fn parse_record(value: &Value) -> Option<CheckpointRecord> {
    match value.as_list()? {
        [Value::Str(key), value, Value::Int(ts)] => Some(CheckpointRecord {
            key: key.clone(),
            value: value.clone(),
            timestamp_us: *ts as u64,
        }),
        _ => None,
    }
}

/// Replays checkpoint files into a memo table. Later records win, and later
/// files win over earlier ones.
pub fn load_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<MemoTable, CheckpointError> {
    let mut table = MemoTable::new();
    for path in paths {
        for rec in read_records(path.as_ref())? {
            table.insert(rec.key, rec.value);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, entries: &[(&str, i64)]) -> PathBuf {
        let path = dir.join("ck.bin");
        let w = CheckpointWriter::open(&path).unwrap();
        for (k, v) in entries {
            w.append(k, &Value::Int(*v), 1).unwrap();
        }
        path
    }

    #[test]
    fn empty_file_loads_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        std::fs::write(&path, b"").unwrap();
        assert!(load_checkpoints(&[&path]).unwrap().is_empty());
    }

    #[test]
    fn later_records_supersede() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), &[("a", 1), ("b", 2), ("a", 3)]);
        let t = load_checkpoints(&[&path]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.lookup("a"), Some(&Value::Int(3)));
    }

    #[test]
    fn reopening_appends_without_second_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), &[("a", 1)]);
        CheckpointWriter::open(&path)
            .unwrap()
            .append("b", &Value::Int(2), 5)
            .unwrap();
        assert_eq!(read_records(&path).unwrap().len(), 2);
    }

    #[test]
    fn later_files_win() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = write(d1.path(), &[("a", 1)]);
        let p2 = write(d2.path(), &[("a", 2)]);
        assert_eq!(
            load_checkpoints(&[&p1, &p2]).unwrap().lookup("a"),
            Some(&Value::Int(2))
        );
    }

    #[test]
    fn corruption_before_the_tail_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), &[("a", 1), ("b", 2)]);
        let mut bytes = std::fs::read(&path).unwrap();
        let header_len = 4 + u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as usize;
        // Corrupt the type tag of the first record's body.
        bytes[header_len + 4] = 0x7f;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoints(&[&path]),
            Err(CheckpointError::Corrupt { .. })
        ));
    }

    #[test]
    fn foreign_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, frame(&Value::Int(1)).unwrap()).unwrap();
        assert!(load_checkpoints(&[&path]).is_err());
    }
}
