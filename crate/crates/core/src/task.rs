//! Task records, lifecycle states and task-level errors.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::app::AppSpec;
use crate::value::{Kwargs, TaskId, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskState {
    Pending,
    Launchable,
    Launched,
    Running,
    Succeeded,
    Failed,
    MemoHit,
    Retrying,
}

impl TaskState {
    pub const ALL: [TaskState; 8] = [
        TaskState::Pending,
        TaskState::Launchable,
        TaskState::Launched,
        TaskState::Running,
        TaskState::Succeeded,
        TaskState::Failed,
        TaskState::MemoHit,
        TaskState::Retrying,
    ];

    /// Whether `self -> to` is an edge of the lifecycle graph.
    ///
    /// Besides the main path, a task may fail without running: from
    /// `Pending` when a dependency failed, from `Launchable` when its
    /// executor cannot accept it, and from `Launched` when the executor
    /// loses it before a worker reports a start.
    pub fn can_transition(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Pending, Launchable)
                | (Pending, MemoHit)
                | (Pending, Failed)
                | (Launchable, Launched)
                | (Launchable, Failed)
                | (Launched, Running)
                | (Launched, Failed)
                | (Running, Succeeded)
                | (Running, Failed)
                | (Failed, Retrying)
                | (Retrying, Launchable)
        )
    }

    /// `Failed` is final only when no retry follows.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TaskState::Succeeded | TaskState::MemoHit | TaskState::Failed
        )
    }

    pub fn is_success(self) -> bool {
        matches!(self, TaskState::Succeeded | TaskState::MemoHit)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Pending => "Pending",
            TaskState::Launchable => "Launchable",
            TaskState::Launched => "Launched",
            TaskState::Running => "Running",
            TaskState::Succeeded => "Succeeded",
            TaskState::Failed => "Failed",
            TaskState::MemoHit => "MemoHit",
            TaskState::Retrying => "Retrying",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown task state `{s}`"))
    }
}

/// What a node of the task graph stands for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskRole {
    App,
    /// Synthetic transfer task inserted for a remote input file.
    Stage {
        uri: String,
    },
    /// Synthetic node that resolves once the producer wrote `path`.
    Output {
        producer: TaskId,
        path: PathBuf,
    },
}

/// One node of the dynamic task graph. Timestamps are microseconds since
/// the engine started.
#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub app: AppSpec,
    pub args: Vec<Value>,
    pub kwargs: Kwargs,
    pub depends_on: BTreeSet<TaskId>,
    pub state: TaskState,
    pub retries_left: u32,
    pub executor_hint: Option<String>,
    pub memoize: bool,
    pub role: TaskRole,
    pub submit_time: u64,
    pub launch_time: Option<u64>,
    pub complete_time: Option<u64>,
}

impl TaskRecord {
    /// Dependencies are exactly the futures referenced by the arguments.
    pub fn derive_dependencies(args: &[Value], kwargs: &Kwargs) -> BTreeSet<TaskId> {
        let mut ids = Vec::new();
        args.iter().for_each(|v| v.collect_futures(&mut ids));
        kwargs.values().for_each(|v| v.collect_futures(&mut ids));
        ids.into_iter().collect()
    }
}

/// Why a task did not produce a value.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TaskError {
    #[error("app error: {message}")]
    App { message: String },
    #[error("shell command exited with status {status}")]
    ShellExit {
        status: i32,
        stderr: Option<PathBuf>,
    },
    #[error("unknown app `{0}`")]
    UnknownApp(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("sandbox error: {0}")]
    Sandbox(String),
    #[error("unknown executor `{0}`")]
    UnknownExecutor(String),
    #[error("executor rejected task: {0}")]
    Rejected(String),
    #[error("manager {manager} lost")]
    ManagerLost { manager: String },
    #[error("worker lost: {0}")]
    WorkerLost(String),
    #[error("task exceeded its timeout")]
    Timeout,
    #[error("no result after {attempts} timed attempts")]
    LlexTimeout { attempts: u32 },
    #[error("transfer of {uri} failed: {reason}")]
    Transfer { uri: String, reason: String },
    #[error("output {path} was not created: {reason}")]
    OutputMissing { path: PathBuf, reason: String },
    #[error("dependency {dependency} failed (root task {root}: {cause})")]
    Dependency {
        dependency: TaskId,
        root: TaskId,
        cause: String,
    },
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl TaskError {
    pub fn app(message: impl Into<String>) -> Self {
        TaskError::App {
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            TaskError::App { .. } => "app",
            TaskError::ShellExit { .. } => "shell_exit",
            TaskError::UnknownApp(_) => "unknown_app",
            TaskError::Template(_) => "template",
            TaskError::Sandbox(_) => "sandbox",
            TaskError::UnknownExecutor(_) => "unknown_executor",
            TaskError::Rejected(_) => "rejected",
            TaskError::ManagerLost { .. } => "manager_lost",
            TaskError::WorkerLost(_) => "worker_lost",
            TaskError::Timeout => "timeout",
            TaskError::LlexTimeout { .. } => "llex_timeout",
            TaskError::Transfer { .. } => "transfer",
            TaskError::OutputMissing { .. } => "output_missing",
            TaskError::Dependency { .. } => "dependency",
            TaskError::Serialization(_) => "serialization",
        }
    }

    /// Wire form: a map with `kind` plus the variant's fields.
    pub fn to_value(&self) -> Value {
        let mut m = Kwargs::new();
        m.insert("kind".into(), Value::str(self.kind()));
        let text = |s: &str| Value::str(s);
        match self {
            TaskError::App { message } => {
                m.insert("message".into(), text(message));
            }
            TaskError::ShellExit { status, stderr } => {
                m.insert("status".into(), Value::Int(*status as i64));
                if let Some(p) = stderr {
                    m.insert("path".into(), text(&p.to_string_lossy()));
                }
            }
            TaskError::UnknownApp(s)
            | TaskError::Template(s)
            | TaskError::Sandbox(s)
            | TaskError::UnknownExecutor(s)
            | TaskError::Rejected(s)
            | TaskError::WorkerLost(s)
            | TaskError::Serialization(s) => {
                m.insert("message".into(), text(s));
            }
            TaskError::ManagerLost { manager } => {
                m.insert("message".into(), text(manager));
            }
            TaskError::Timeout => {}
            TaskError::LlexTimeout { attempts } => {
                m.insert("status".into(), Value::Int(*attempts as i64));
            }
            TaskError::Transfer { uri, reason } => {
                m.insert("uri".into(), text(uri));
                m.insert("message".into(), text(reason));
            }
            TaskError::OutputMissing { path, reason } => {
                m.insert("path".into(), text(&path.to_string_lossy()));
                m.insert("message".into(), text(reason));
            }
            TaskError::Dependency {
                dependency,
                root,
                cause,
            } => {
                m.insert("dependency".into(), Value::Int(dependency.0 as i64));
                m.insert("root".into(), Value::Int(root.0 as i64));
                m.insert("message".into(), text(cause));
            }
        }
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Option<TaskError> {
        let m = v.as_map()?;
        let s = |k: &str| {
            m.get(k)
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string()
        };
        let i = |k: &str| m.get(k).and_then(Value::as_int).unwrap_or_default();
        Some(match m.get("kind")?.as_str()? {
            "app" => TaskError::App {
                message: s("message"),
            },
            "shell_exit" => TaskError::ShellExit {
                status: i("status") as i32,
                stderr: m.get("path").and_then(Value::as_str).map(PathBuf::from),
            },
            "unknown_app" => TaskError::UnknownApp(s("message")),
            "template" => TaskError::Template(s("message")),
            "sandbox" => TaskError::Sandbox(s("message")),
            "unknown_executor" => TaskError::UnknownExecutor(s("message")),
            "rejected" => TaskError::Rejected(s("message")),
            "manager_lost" => TaskError::ManagerLost {
                manager: s("message"),
            },
            "worker_lost" => TaskError::WorkerLost(s("message")),
            "timeout" => TaskError::Timeout,
            "llex_timeout" => TaskError::LlexTimeout {
                attempts: i("status") as u32,
            },
            "transfer" => TaskError::Transfer {
                uri: s("uri"),
                reason: s("message"),
            },
            "output_missing" => TaskError::OutputMissing {
                path: PathBuf::from(s("path")),
                reason: s("message"),
            },
            "dependency" => TaskError::Dependency {
                dependency: TaskId(i("dependency") as u64),
                root: TaskId(i("root") as u64),
                cause: s("message"),
            },
            "serialization" => TaskError::Serialization(s("message")),
            _ => return None,
        })
    }
}
