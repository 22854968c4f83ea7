//! Memoization keys and the in-memory result cache.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::app::AppSpec;
use crate::codec::{self, EncodeError};
use crate::value::{Kwargs, Value};

/// Digest algorithm behind [`memo_key`]; written into checkpoint headers.
pub const DIGEST_ALGORITHM: &str = "sha256";

/// Digest over the app name, its body fingerprint and the canonical
/// encoding of the (resolved) arguments.
pub fn memo_key(app: &AppSpec, args: &[Value], kwargs: &Kwargs) -> Result<String, EncodeError> {
    let framed = Value::List(vec![
        Value::Str(app.name.clone()),
        Value::Str(app.body_fingerprint.clone()),
        Value::List(args.to_vec()),
        Value::Map(kwargs.clone()),
    ]);
    let bytes = codec::encode(&framed)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Default)]
pub struct MemoTable {
    entries: HashMap<String, Value>,
}

impl MemoTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: String, value: Value) {
        self.entries.insert(key, value);
    }

    /// Merges `other` into `self`; entries of `other` win.
    pub fn merge(&mut self, other: MemoTable) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::Registry;

    fn key(app: &AppSpec, args: &[i64]) -> String {
        let args: Vec<Value> = args.iter().map(|v| Value::Int(*v)).collect();
        memo_key(app, &args, &Kwargs::new()).unwrap()
    }

    #[test]
    fn deterministic() {
        let f = Registry::with_builtins().app("add").unwrap();
        assert_eq!(key(&f, &[1, 2]), key(&f, &[1, 2]));
        assert_eq!(key(&f, &[1, 2]).len(), 64);
    }

    #[test]
    fn argument_order_matters() {
        let f = Registry::with_builtins().app("add").unwrap();
        // The canonical encodings differ, so the digests must too.
        let enc = |a: i64, b: i64| {
            codec::encode(&Value::List(vec![Value::Int(a), Value::Int(b)])).unwrap()
        };
        assert_ne!(enc(1, 2), enc(2, 1));
        assert_ne!(key(&f, &[1, 2]), key(&f, &[2, 1]));
    }

    #[test]
    fn fingerprint_participates() {
        let f = Registry::with_builtins().app("add").unwrap();
        let mut g = f.clone();
        g.body_fingerprint.push('0');
        assert_ne!(key(&f, &[1, 2]), key(&g, &[1, 2]));
    }

    #[test]
    fn kwargs_insertion_order_is_irrelevant() {
        let f = Registry::with_builtins().app("concat").unwrap();
        let mut a = Kwargs::new();
        a.insert("x".into(), Value::Int(1));
        a.insert("y".into(), Value::Int(2));
        let mut b = Kwargs::new();
        b.insert("y".into(), Value::Int(2));
        b.insert("x".into(), Value::Int(1));
        assert_eq!(memo_key(&f, &[], &a), memo_key(&f, &[], &b));
    }

    #[test]
    fn futures_are_rejected() {
        let f = Registry::with_builtins().app("add").unwrap();
        assert!(memo_key(
            &f,
            &[Value::Future(crate::value::TaskId(1))],
            &Kwargs::new()
        )
        .is_err());
    }
}
