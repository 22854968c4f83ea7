//! Pluggable executors and the worker-side execution kernel.

pub mod kernel;
pub mod local;

use std::sync::Arc;

use thiserror::Error;

use crate::app::AppSpec;
use crate::clock::RunClock;
use crate::elasticity::LoadSnapshot;
use crate::future::Outcome;
use crate::monitor::Monitor;
use crate::value::{Kwargs, TaskId, Value};

pub use kernel::{render_template, ExecutionKernel};
pub use local::{InlineExecutor, LocalExecutor};

/// One attempt of a task as handed to an executor. Arguments are fully
/// resolved: they contain no futures.
#[derive(Debug, Clone)]
pub struct ExecTask {
    pub task_id: TaskId,
    pub attempt: u32,
    pub app: AppSpec,
    pub args: Vec<Value>,
    pub kwargs: Kwargs,
}

/// Result of one attempt. `started_us`/`finished_us` are run-relative and
/// absent when the attempt never reached a worker.
#[derive(Debug, Clone)]
pub struct Completion {
    pub task_id: TaskId,
    pub attempt: u32,
    pub outcome: Outcome,
    pub started_us: Option<u64>,
    pub finished_us: Option<u64>,
    /// Worker that ran the attempt, e.g. `<manager>/<index>`.
    pub location: Option<String>,
}

impl Completion {
    pub fn failed(task: &ExecTask, error: crate::task::TaskError) -> Self {
        Completion {
            task_id: task.task_id,
            attempt: task.attempt,
            outcome: Err(error),
            started_us: None,
            finished_us: None,
            location: None,
        }
    }
}

pub type CompletionSink = Arc<dyn Fn(Completion) + Send + Sync>;

/// Everything an executor receives from the engine when it starts.
#[derive(Clone)]
pub struct ExecutorContext {
    pub sink: CompletionSink,
    pub monitor: Monitor,
}

impl ExecutorContext {
    pub fn clock(&self) -> &RunClock {
        self.monitor.clock()
    }

    /// Context that drops completions; for executors driven directly in
    /// tests.
    pub fn detached() -> Self {
        ExecutorContext {
            sink: Arc::new(|_| {}),
            monitor: Monitor::disabled(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutorStatus {
    Starting,
    Running,
    Draining,
    Stopped,
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("executor {0} is not running")]
    NotRunning(String),
    #[error("executor {0} does not support scaling")]
    Unsupported(String),
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("unknown manager {0}")]
    UnknownManager(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("executor failed to start: {0}")]
    Start(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interface between the engine and a task transport.
///
/// `submit_task` must not block on task completion; outcomes are delivered
/// through the context's sink, from any thread.
pub trait Executor: Send + Sync {
    fn label(&self) -> &str;

    fn start(&self, ctx: ExecutorContext) -> Result<(), ExecutorError>;

    fn submit_task(&self, task: ExecTask) -> Result<(), ExecutorError>;

    /// Attempts submitted whose completion has not yet been delivered.
    fn pending_count(&self) -> usize;

    fn status(&self) -> ExecutorStatus;

    /// Requests `blocks` new blocks; returns their ids.
    fn scale_out(&self, blocks: usize) -> Result<Vec<String>, ExecutorError> {
        let _ = blocks;
        Err(ExecutorError::Unsupported(self.label().to_string()))
    }

    fn scale_in(&self, block_ids: &[String]) -> Result<(), ExecutorError> {
        let _ = block_ids;
        Err(ExecutorError::Unsupported(self.label().to_string()))
    }

    /// Load seen by the scaling strategy; `None` for executors that cannot
    /// scale.
    fn load_snapshot(&self) -> Option<LoadSnapshot> {
        None
    }

    fn shutdown(&self) -> Result<(), ExecutorError>;
}
