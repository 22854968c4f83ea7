//! App descriptions and the worker-side function registry.
//!
//! The engine never ships code. A native app is a name that every worker
//! resolves in its own [`Registry`]; a shell app carries its command
//! template. Both carry a fingerprint of their body so memo keys change
//! when the implementation does.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::builtins;
use crate::task::TaskError;
use crate::value::{Kwargs, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppKind {
    NativeFunction,
    ShellCommand { template: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppSpec {
    pub kind: AppKind,
    pub name: String,
    pub body_fingerprint: String,
    pub stdout_path: Option<PathBuf>,
    pub stderr_path: Option<PathBuf>,
}

impl AppSpec {
    /// A shell app whose fingerprint is the digest of its template.
    pub fn shell(label: impl Into<String>, template: impl Into<String>) -> Self {
        let template = template.into();
        AppSpec {
            body_fingerprint: fingerprint(&["shell", &template]),
            kind: AppKind::ShellCommand { template },
            name: label.into(),
            stdout_path: None,
            stderr_path: None,
        }
    }

    pub fn with_stdout(mut self, path: impl Into<PathBuf>) -> Self {
        self.stdout_path = Some(path.into());
        self
    }

    pub fn with_stderr(mut self, path: impl Into<PathBuf>) -> Self {
        self.stderr_path = Some(path.into());
        self
    }

    pub fn is_native(&self) -> bool {
        matches!(self.kind, AppKind::NativeFunction)
    }

    pub fn to_value(&self) -> Value {
        let mut m = Kwargs::new();
        match &self.kind {
            AppKind::NativeFunction => {
                m.insert("kind".into(), Value::str("native"));
            }
            AppKind::ShellCommand { template } => {
                m.insert("kind".into(), Value::str("shell"));
                m.insert("template".into(), Value::str(template.as_str()));
            }
        }
        m.insert("name".into(), Value::str(self.name.as_str()));
        m.insert(
            "fingerprint".into(),
            Value::str(self.body_fingerprint.as_str()),
        );
        if let Some(p) = &self.stdout_path {
            m.insert("stdout".into(), Value::str(p.to_string_lossy()));
        }
        if let Some(p) = &self.stderr_path {
            m.insert("stderr".into(), Value::str(p.to_string_lossy()));
        }
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Option<AppSpec> {
        let m = v.as_map()?;
        let get = |k: &str| m.get(k).and_then(Value::as_str);
        let kind = match get("kind")? {
            "native" => AppKind::NativeFunction,
            "shell" => AppKind::ShellCommand {
                template: get("template")?.to_string(),
            },
            _ => return None,
        };
        Some(AppSpec {
            kind,
            name: get("name")?.to_string(),
            body_fingerprint: get("fingerprint")?.to_string(),
            stdout_path: get("stdout").map(PathBuf::from),
            stderr_path: get("stderr").map(PathBuf::from),
        })
    }
}

/// Hex sha-256 over length-delimited parts.
pub fn fingerprint(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

pub type NativeFn = dyn Fn(&[Value], &Kwargs) -> Result<Value, TaskError> + Send + Sync;

#[derive(Clone)]
struct Entry {
    fingerprint: String,
    func: Arc<NativeFn>,
}

/// Named native functions available to workers.
#[derive(Clone, Default)]
pub struct Registry {
    entries: HashMap<String, Entry>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.entries.keys().collect();
        names.sort();
        f.debug_struct("Registry").field("apps", &names).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the functions every agent process knows.
    pub fn with_builtins() -> Self {
        let mut r = Registry::new();
        builtins::install(&mut r);
        r
    }

    /// Registers `func` under `name`. `version` stands in for the function
    /// body: bump it whenever the implementation changes.
    pub fn register<F>(&mut self, name: &str, version: &str, func: F) -> &mut Self
    where
        F: Fn(&[Value], &Kwargs) -> Result<Value, TaskError> + Send + Sync + 'static,
    {
        self.entries.insert(
            name.to_string(),
            Entry {
                fingerprint: fingerprint(&["native", name, version]),
                func: Arc::new(func),
            },
        );
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.entries.keys().cloned().collect();
        names.sort();
        names
    }

    /// App spec for a registered function.
    pub fn app(&self, name: &str) -> Result<AppSpec, TaskError> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| TaskError::UnknownApp(name.to_string()))?;
        Ok(AppSpec {
            kind: AppKind::NativeFunction,
            name: name.to_string(),
            body_fingerprint: entry.fingerprint.clone(),
            stdout_path: None,
            stderr_path: None,
        })
    }

    pub fn call(&self, name: &str, args: &[Value], kwargs: &Kwargs) -> Result<Value, TaskError> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| TaskError::UnknownApp(name.to_string()))?;
        (entry.func)(args, kwargs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprints_are_deterministic() {
        let a = AppSpec::shell("hello2", "echo 'Hello {0}'");
        let b = AppSpec::shell("other label", "echo 'Hello {0}'");
        assert_eq!(a.body_fingerprint, b.body_fingerprint);
        assert_ne!(
            a.body_fingerprint,
            AppSpec::shell("hello2", "echo 'Hi {0}'").body_fingerprint
        );
        let r1 = Registry::with_builtins();
        let r2 = Registry::with_builtins();
        assert_eq!(r1.app("hello").unwrap(), r2.app("hello").unwrap());
    }

    #[test]
    fn version_bump_changes_fingerprint() {
        let mut r = Registry::new();
        r.register("f", "1", |_, _| Ok(Value::Int(1)));
        let v1 = r.app("f").unwrap().body_fingerprint;
        r.register("f", "2", |_, _| Ok(Value::Int(1)));
        assert_ne!(v1, r.app("f").unwrap().body_fingerprint);
    }

    #[test]
    fn unknown_names_are_errors() {
        let r = Registry::new();
        assert_eq!(r.app("nope"), Err(TaskError::UnknownApp("nope".into())));
        assert!(r.call("nope", &[], &Kwargs::new()).is_err());
    }

    #[test]
    fn spec_wire_form_round_trips() {
        let spec = AppSpec::shell("s", "exit {0}").with_stdout("/tmp/o");
        assert_eq!(AppSpec::from_value(&spec.to_value()), Some(spec));
        let native = Registry::with_builtins().app("noop").unwrap();
        assert_eq!(AppSpec::from_value(&native.to_value()), Some(native));
    }
}
