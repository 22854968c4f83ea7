//! File staging.
//!
//! Remote inputs become synthetic transfer tasks in the graph: the engine
//! replaces each unstaged http [`FileRef`] argument by the future of a
//! stage task and the consumer receives the staged reference once the
//! transfer succeeds.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use sha2::{Digest, Sha256};

use crate::task::TaskError;
use crate::value::{FileRef, Scheme, TaskId, Value};

const HTTP_TIMEOUT: Duration = Duration::from_secs(60);

/// Content-addressed file name: first 16 hex digits of the digest, then the
/// original base name.
pub fn staged_name(digest_hex: &str, basename: &str) -> String {
    format!("{}_{}", &digest_hex[..16.min(digest_hex.len())], basename)
}

fn transfer_err(uri: &str, reason: impl Into<String>) -> TaskError {
    TaskError::Transfer {
        uri: uri.to_string(),
        reason: reason.into(),
    }
}

fn advertised_sha256(header: &str) -> Option<Vec<u8>> {
    header.split(',').find_map(|part| {
        let (alg, b64) = part.trim().split_once('=')?;
        if alg.eq_ignore_ascii_case("sha-256") {
            base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .ok()
        } else {
            None
        }
    })
}

/// Downloads `file` into `dest_dir` and returns the staged reference.
///
/// The body is hashed while it streams to a temporary file; its length and
/// digest are checked against `Content-Length` and `Digest: sha-256=` when
/// the server sends them.
pub fn stage_http(file: &FileRef, dest_dir: &Path) -> Result<FileRef, TaskError> {
    let uri = file.uri.as_str();
    if file.scheme != Scheme::Http {
        return Err(transfer_err(uri, "not an http reference"));
    }
    std::fs::create_dir_all(dest_dir)
        .map_err(|e| transfer_err(uri, format!("cannot create {}: {e}", dest_dir.display())))?;

    let response = match ureq::get(uri).timeout(HTTP_TIMEOUT).call() {
        Ok(r) => r,
        Err(ureq::Error::Status(code, _)) => {
            return Err(transfer_err(uri, format!("HTTP status {code}")))
        }
        Err(e) => return Err(transfer_err(uri, e.to_string())),
    };
    let expected_len: Option<u64> = response
        .header("Content-Length")
        .and_then(|v| v.trim().parse().ok());
    let expected_digest = response.header("Digest").and_then(advertised_sha256);

    let partial = dest_dir.join(format!(".partial-{}", uuid::Uuid::new_v4()));
    let result = (|| {
        let mut out = File::create(&partial).map_err(|e| transfer_err(uri, e.to_string()))?;
        let mut reader = response.into_reader();
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 64 * 1024];
        let mut total = 0u64;
        loop {
            let n = reader
                .read(&mut buf)
                .map_err(|e| transfer_err(uri, format!("read failed after {total} bytes: {e}")))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            out.write_all(&buf[..n])
                .map_err(|e| transfer_err(uri, e.to_string()))?;
            total += n as u64;
        }
        out.sync_all()
            .map_err(|e| transfer_err(uri, e.to_string()))?;
        if let Some(len) = expected_len {
            if len != total {
                return Err(transfer_err(
                    uri,
                    format!("expected {len} bytes, received {total}"),
                ));
            }
        }
        let digest = hasher.finalize();
        if let Some(want) = expected_digest {
            if want.as_slice() != digest.as_slice() {
                return Err(transfer_err(uri, "sha-256 digest mismatch"));
            }
        }
        Ok(hex::encode(digest))
    })();

    let digest = match result {
        Ok(d) => d,
        Err(e) => {
            let _ = std::fs::remove_file(&partial);
            return Err(e);
        }
    };
    let dest = dest_dir.join(staged_name(&digest, file.basename()));
    std::fs::rename(&partial, &dest).map_err(|e| transfer_err(uri, e.to_string()))?;
    tracing::debug!(%uri, dest = %dest.display(), "staged");
    Ok(FileRef {
        scheme: Scheme::Http,
        uri: file.uri.clone(),
        local_path: Some(dest),
        staged: true,
    })
}

/// At most one stage task per (uri, executor label) in a run.
#[derive(Debug, Default)]
pub struct StagingCache {
    entries: Mutex<HashMap<(String, String), TaskId>>,
}

impl StagingCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stage task for `uri` on `label`, creating it with `create` on first
    /// use.
    pub fn get_or_insert(&self, uri: &str, label: &str, create: impl FnOnce() -> TaskId) -> TaskId {
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        *entries
            .entry((uri.to_string(), label.to_string()))
            .or_insert_with(create)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rewrites the file references inside `value`.
///
/// Local files that exist are marked staged in place. Unstaged http files
/// are replaced by the future of their stage task, created through `stage`
/// on a cache miss. Values that were already rewritten are left alone, so
/// resolving twice adds nothing.
pub fn resolve_files(
    value: &Value,
    label: &str,
    cache: &StagingCache,
    stage: &mut dyn FnMut(&FileRef) -> TaskId,
) -> Value {
    match value {
        Value::File(f) if f.staged => value.clone(),
        Value::File(f) if f.scheme == Scheme::Http => {
            Value::Future(cache.get_or_insert(&f.uri, label, || stage(f)))
        }
        Value::File(f) => {
            let path = PathBuf::from(&f.uri);
            if path.exists() {
                Value::File(FileRef {
                    local_path: Some(path),
                    staged: true,
                    ..f.clone()
                })
            } else {
                value.clone()
            }
        }
        Value::List(items) => Value::List(
            items
                .iter()
                .map(|v| resolve_files(v, label, cache, stage))
                .collect(),
        ),
        Value::Map(m) => Value::Map(
            m.iter()
                .map(|(k, v)| (k.clone(), resolve_files(v, label, cache, stage)))
                .collect(),
        ),
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_is_content_addressed() {
        let d = hex::encode(Sha256::digest(b"abc"));
        assert_eq!(staged_name(&d, "x.txt"), format!("{}_x.txt", &d[..16]));
    }

    #[test]
    fn digest_header_parsing() {
        let b64 = base64::engine::general_purpose::STANDARD.encode([1u8, 2, 3]);
        assert_eq!(
            advertised_sha256(&format!("md5=xx, SHA-256={b64}")),
            Some(vec![1, 2, 3])
        );
        assert_eq!(advertised_sha256("md5=xx"), None);
    }

    #[test]
    fn resolution_is_idempotent_and_cached() {
        let cache = StagingCache::new();
        let mut created = 0u64;
        let mut stage = |_: &FileRef| {
            created += 1;
            TaskId(100 + created)
        };
        let http = Value::File(FileRef::http("http://h/data.bin"));
        let args = Value::List(vec![http.clone(), http.clone()]);
        let once = resolve_files(&args, "a", &cache, &mut stage);
        let twice = resolve_files(&once, "a", &cache, &mut stage);
        assert_eq!(once, twice);
        assert_eq!(once, Value::List(vec![Value::Future(TaskId(101)); 2]));
        resolve_files(&http, "b", &cache, &mut stage);
        assert_eq!(created, 2);
    }

    #[test]
    fn existing_local_file_is_not_staged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.txt");
        std::fs::write(&path, "x").unwrap();
        let cache = StagingCache::new();
        let mut stage = |_: &FileRef| -> TaskId { panic!("no stage task expected") };
        let v = resolve_files(&Value::File(FileRef::local(&path)), "a", &cache, &mut stage);
        assert_eq!(
            v.as_file().unwrap().local_path.as_deref(),
            Some(path.as_path())
        );
        assert!(cache.is_empty());
    }
}
