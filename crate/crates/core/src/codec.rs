//! Binary value codec.
//!
//! Each value is a one-byte tag followed by its payload. Integers and floats
//! use fixed 8-byte big-endian widths, strings/bytes/containers carry a 4-byte
//! big-endian length (or element count) prefix, and map entries are written
//! in ascending key order. The encoding of a value is therefore canonical,
//! which memo keys and checkpoint files rely on.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::value::{FileRef, Scheme, TaskId, Value};

const TAG_INT: u8 = 0x01;
const TAG_FLOAT: u8 = 0x02;
const TAG_BOOL: u8 = 0x03;
const TAG_STR: u8 = 0x04;
const TAG_BYTES: u8 = 0x05;
const TAG_LIST: u8 = 0x06;
const TAG_MAP: u8 = 0x07;
const TAG_FILE: u8 = 0x08;
const TAG_STATUS: u8 = 0x0A;

const MAX_DEPTH: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("value contains an unresolved future of task {0}")]
    UnresolvedFuture(TaskId),
    #[error("length {0} does not fit the 32-bit length prefix")]
    TooLarge(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("unknown type tag 0x{tag:02x} at offset {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("invalid utf-8 string at offset {0}")]
    InvalidUtf8(usize),
    #[error("invalid {what} byte 0x{byte:02x} at offset {offset}")]
    InvalidByte {
        what: &'static str,
        byte: u8,
        offset: usize,
    },
    #[error("map keys out of order or duplicated at offset {0}")]
    UnorderedKeys(usize),
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("nesting deeper than {MAX_DEPTH}")]
    TooDeep,
}

pub fn encode(value: &Value) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(32);
    encode_into(value, &mut out)?;
    Ok(out)
}

pub fn encode_into(value: &Value, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    match value {
        Value::Int(v) => {
            out.push(TAG_INT);
            out.extend_from_slice(&v.to_be_bytes());
        }
        Value::Float(v) => {
            out.push(TAG_FLOAT);
            out.extend_from_slice(&v.to_bits().to_be_bytes());
        }
        Value::Bool(v) => {
            out.push(TAG_BOOL);
            out.push(*v as u8);
        }
        Value::Str(s) => {
            out.push(TAG_STR);
            put_bytes(s.as_bytes(), out)?;
        }
        Value::Bytes(b) => {
            out.push(TAG_BYTES);
            put_bytes(b, out)?;
        }
        Value::List(items) => {
            out.push(TAG_LIST);
            put_len(items.len(), out)?;
            for item in items {
                encode_into(item, out)?;
            }
        }
        Value::Map(map) => {
            out.push(TAG_MAP);
            put_len(map.len(), out)?;
            for (k, v) in map {
                put_bytes(k.as_bytes(), out)?;
                encode_into(v, out)?;
            }
        }
        Value::File(f) => {
            out.push(TAG_FILE);
            out.push(match f.scheme {
                Scheme::Local => 0,
                Scheme::Http => 1,
            });
            put_bytes(f.uri.as_bytes(), out)?;
            match &f.local_path {
                Some(p) => {
                    out.push(1);
                    put_bytes(p.to_string_lossy().as_bytes(), out)?;
                }
                None => out.push(0),
            }
            out.push(f.staged as u8);
        }
        Value::Future(id) => return Err(EncodeError::UnresolvedFuture(*id)),
        Value::Status(code) => {
            out.push(TAG_STATUS);
            out.extend_from_slice(&code.to_be_bytes());
        }
    }
    Ok(())
}

fn put_len(len: usize, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let len32 = u32::try_from(len).map_err(|_| EncodeError::TooLarge(len))?;
    out.extend_from_slice(&len32.to_be_bytes());
    Ok(())
}

fn put_bytes(bytes: &[u8], out: &mut Vec<u8>) -> Result<(), EncodeError> {
    put_len(bytes.len(), out)?;
    out.extend_from_slice(bytes);
    Ok(())
}

/// Decodes exactly one value occupying the whole input.
pub fn decode(bytes: &[u8]) -> Result<Value, DecodeError> {
    let mut reader = Reader { buf: bytes, pos: 0 };
    let value = reader.value(0)?;
    if reader.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - reader.pos));
    }
    Ok(value)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::Truncated(self.pos));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn byte(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn fixed<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut arr = [0u8; N];
        arr.copy_from_slice(self.take(N)?);
        Ok(arr)
    }

    fn len(&mut self) -> Result<usize, DecodeError> {
        Ok(u32::from_be_bytes(self.fixed::<4>()?) as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.len()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let at = self.pos;
        let raw = self.bytes()?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|_| DecodeError::InvalidUtf8(at))
    }

    fn flag(&mut self, what: &'static str) -> Result<bool, DecodeError> {
        let offset = self.pos;
        match self.byte()? {
            0 => Ok(false),
            1 => Ok(true),
            byte => Err(DecodeError::InvalidByte { what, byte, offset }),
        }
    }

    fn value(&mut self, depth: usize) -> Result<Value, DecodeError> {
        if depth > MAX_DEPTH {
            return Err(DecodeError::TooDeep);
        }
        let offset = self.pos;
        let tag = self.byte()?;
        Ok(match tag {
            TAG_INT => Value::Int(i64::from_be_bytes(self.fixed()?)),
            TAG_FLOAT => Value::Float(f64::from_bits(u64::from_be_bytes(self.fixed()?))),
            TAG_BOOL => Value::Bool(self.flag("bool")?),
            TAG_STR => Value::Str(self.string()?),
            TAG_BYTES => Value::Bytes(self.bytes()?.to_vec()),
            TAG_LIST => {
                let n = self.len()?;
                // Every element needs at least one byte.
                if n > self.buf.len() - self.pos {
                    return Err(DecodeError::Truncated(self.pos));
                }
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    items.push(self.value(depth + 1)?);
                }
                Value::List(items)
            }
            TAG_MAP => {
                let n = self.len()?;
                let mut map = BTreeMap::new();
                let mut last: Option<String> = None;
                for _ in 0..n {
                    let key_at = self.pos;
                    let key = self.string()?;
                    if last.as_ref().is_some_and(|prev| *prev >= key) {
                        return Err(DecodeError::UnorderedKeys(key_at));
                    }
                    let value = self.value(depth + 1)?;
                    last = Some(key.clone());
                    map.insert(key, value);
                }
                Value::Map(map)
            }
            TAG_FILE => {
                let scheme_at = self.pos;
                let scheme = match self.byte()? {
                    0 => Scheme::Local,
                    1 => Scheme::Http,
                    byte => {
                        return Err(DecodeError::InvalidByte {
                            what: "scheme",
                            byte,
                            offset: scheme_at,
                        })
                    }
                };
                let uri = self.string()?;
                let local_path = if self.flag("path marker")? {
                    Some(PathBuf::from(self.string()?))
                } else {
                    None
                };
                let staged = self.flag("staged")?;
                Value::File(FileRef {
                    scheme,
                    uri,
                    local_path,
                    staged,
                })
            }
            TAG_STATUS => Value::Status(i32::from_be_bytes(self.fixed()?)),
            tag => return Err(DecodeError::UnknownTag { tag, offset }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_zero_round_trips() {
        let bytes = encode(&Value::Int(0)).unwrap();
        assert_eq!(bytes, vec![TAG_INT, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(decode(&bytes).unwrap(), Value::Int(0));
    }

    #[test]
    fn hello_world_list_round_trips() {
        let v = Value::List(vec![Value::str("Hello World")]);
        let bytes = encode(&v).unwrap();
        assert_eq!(&bytes[..5], &[TAG_LIST, 0, 0, 0, 1]);
        assert_eq!(&bytes[5..10], &[TAG_STR, 0, 0, 0, 11]);
        assert_eq!(decode(&bytes).unwrap(), v);
    }

    #[test]
    fn futures_cannot_be_encoded() {
        let v = Value::List(vec![Value::Future(TaskId(4))]);
        assert_eq!(encode(&v), Err(EncodeError::UnresolvedFuture(TaskId(4))));
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert_eq!(decode(&[]), Err(DecodeError::Truncated(0)));
        assert!(matches!(
            decode(&[0x7f]),
            Err(DecodeError::UnknownTag { tag: 0x7f, .. })
        ));
        assert!(matches!(
            decode(&[TAG_BOOL, 2]),
            Err(DecodeError::InvalidByte { .. })
        ));
        assert_eq!(
            decode(&[TAG_STR, 0, 0, 0, 5, b'a']),
            Err(DecodeError::Truncated(5))
        );
        let mut bytes = encode(&Value::Int(1)).unwrap();
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(DecodeError::TrailingBytes(1)));
        assert!(matches!(
            decode(&[TAG_STR, 0, 0, 0, 1, 0xff]),
            Err(DecodeError::InvalidUtf8(_))
        ));
    }

    #[test]
    fn unordered_map_keys_are_rejected() {
        // {"b": 1, "a": 1} written in the wrong order by hand.
        let mut bytes = vec![TAG_MAP, 0, 0, 0, 2];
        for key in ["b", "a"] {
            bytes.extend_from_slice(&[0, 0, 0, 1, key.as_bytes()[0]]);
            bytes.extend_from_slice(&encode(&Value::Int(1)).unwrap());
        }
        assert!(matches!(decode(&bytes), Err(DecodeError::UnorderedKeys(_))));
    }

    #[test]
    fn huge_list_count_does_not_allocate() {
        assert!(matches!(
            decode(&[TAG_LIST, 0xff, 0xff, 0xff, 0xff]),
            Err(DecodeError::Truncated(_))
        ));
    }

    #[test]
    fn nesting_limit() {
        let mut v = Value::Int(0);
        for _ in 0..(MAX_DEPTH + 2) {
            v = Value::List(vec![v]);
        }
        let bytes = encode(&v).unwrap();
        assert_eq!(decode(&bytes), Err(DecodeError::TooDeep));
    }
}
