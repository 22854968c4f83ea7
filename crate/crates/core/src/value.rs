//! Values passed between apps: arguments, results and file references.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

/// Identifier of a task, unique within one engine run and strictly
/// increasing in submission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Keyword arguments, ordered by key.
pub type Kwargs = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Local,
    Http,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Local => "local",
            Scheme::Http => "http",
        }
    }
}

/// Reference to a file that may live on another host. Remote files are
/// staged before the consuming app runs and `local_path` is filled in.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FileRef {
    pub scheme: Scheme,
    pub uri: String,
    pub local_path: Option<PathBuf>,
    pub staged: bool,
}

impl FileRef {
    pub fn local(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        FileRef {
            scheme: Scheme::Local,
            uri: path.to_string_lossy().into_owned(),
            local_path: None,
            staged: false,
        }
    }

    pub fn http(url: impl Into<String>) -> Self {
        FileRef {
            scheme: Scheme::Http,
            uri: url.into(),
            local_path: None,
            staged: false,
        }
    }

    /// Builds a reference from a uri, picking the scheme from its prefix.
    pub fn parse(uri: &str) -> Self {
        if uri.starts_with("http://") || uri.starts_with("https://") {
            FileRef::http(uri)
        } else if let Some(path) = uri.strip_prefix("file://") {
            FileRef::local(path)
        } else {
            FileRef::local(uri)
        }
    }

    /// Path the app should use: the staged location if known, otherwise the
    /// uri itself for local files.
    pub fn path(&self) -> Option<PathBuf> {
        match (&self.local_path, self.scheme) {
            (Some(p), _) => Some(p.clone()),
            (None, Scheme::Local) => Some(PathBuf::from(&self.uri)),
            (None, Scheme::Http) => None,
        }
    }

    pub fn basename(&self) -> &str {
        let trimmed = self.uri.split(['?', '#']).next().unwrap_or("");
        match trimmed.rsplit('/').next() {
            Some(name) if !name.is_empty() => name,
            _ => "download",
        }
    }
}

/// Immutable argument/result value. `Future` stands for the eventual result
/// of another task and is replaced by the concrete value before shipping.
#[derive(Debug, Clone)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
    File(FileRef),
    Future(TaskId),
    Status(i32),
}

// Floats compare by bit pattern so that every value equals its own decoding.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Int(a), Int(b)) => a == b,
            (Float(a), Float(b)) => a.to_bits() == b.to_bits(),
            (Bool(a), Bool(b)) => a == b,
            (Str(a), Str(b)) => a == b,
            (Bytes(a), Bytes(b)) => a == b,
            (List(a), List(b)) => a == b,
            (Map(a), Map(b)) => a == b,
            (File(a), File(b)) => a == b,
            (Future(a), Future(b)) => a == b,
            (Status(a), Status(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Value {
    pub fn str(s: impl Into<String>) -> Self {
        Value::Str(s.into())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            Value::Status(v) => Some(*v as i64),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_file(&self) -> Option<&FileRef> {
        match self {
            Value::File(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    /// Appends every task id referenced by a `Future` anywhere inside this
    /// value.
    pub fn collect_futures(&self, out: &mut Vec<TaskId>) {
        match self {
            Value::Future(id) => out.push(*id),
            Value::List(items) => items.iter().for_each(|v| v.collect_futures(out)),
            Value::Map(map) => map.values().for_each(|v| v.collect_futures(out)),
            _ => {}
        }
    }

    pub fn contains_future(&self) -> bool {
        match self {
            Value::Future(_) => true,
            Value::List(items) => items.iter().any(Value::contains_future),
            Value::Map(map) => map.values().any(Value::contains_future),
            _ => false,
        }
    }

    /// Returns a copy with every `Future` replaced by `resolve(id)`.
    pub fn substitute(&self, resolve: &impl Fn(TaskId) -> Value) -> Value {
        match self {
            Value::Future(id) => resolve(*id),
            Value::List(items) => {
                Value::List(items.iter().map(|v| v.substitute(resolve)).collect())
            }
            Value::Map(map) => Value::Map(
                map.iter()
                    .map(|(k, v)| (k.clone(), v.substitute(resolve)))
                    .collect(),
            ),
            other => other.clone(),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<FileRef> for Value {
    fn from(v: FileRef) -> Self {
        Value::File(v)
    }
}

impl From<Vec<Value>> for Value {
    fn from(v: Vec<Value>) -> Self {
        Value::List(v)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(s) => write!(f, "{s}"),
            Value::Bytes(b) => write!(f, "<{} bytes>", b.len()),
            Value::List(items) => {
                write!(f, "[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, "]")
            }
            Value::Map(map) => {
                write!(f, "{{")?;
                for (i, (k, v)) in map.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                write!(f, "}}")
            }
            Value::File(r) => match &r.local_path {
                Some(p) => write!(f, "{}", p.display()),
                None => write!(f, "{}", r.uri),
            },
            Value::Future(id) => write!(f, "<future {id}>"),
            Value::Status(code) => write!(f, "exit {code}"),
        }
    }
}
