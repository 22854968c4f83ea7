//! Single-assignment result handles.

use std::fmt;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use crate::task::TaskError;
use crate::value::{TaskId, Value};

pub type Outcome = Result<Value, TaskError>;

struct Inner {
    task_id: TaskId,
    slot: OnceLock<Outcome>,
    lock: Mutex<()>,
    ready: Condvar,
    outputs: Vec<FutureHandle>,
}

/// Handle to the eventual outcome of a task. The outcome is published once;
/// every reader observes the same value.
#[derive(Clone)]
pub struct FutureHandle {
    inner: Arc<Inner>,
}

impl fmt::Debug for FutureHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FutureHandle")
            .field("task_id", &self.inner.task_id)
            .field("done", &self.done())
            .finish()
    }
}

impl FutureHandle {
    pub(crate) fn new(task_id: TaskId, outputs: Vec<FutureHandle>) -> Self {
        FutureHandle {
            inner: Arc::new(Inner {
                task_id,
                slot: OnceLock::new(),
                lock: Mutex::new(()),
                ready: Condvar::new(),
                outputs,
            }),
        }
    }

    pub fn task_id(&self) -> TaskId {
        self.inner.task_id
    }

    /// Argument value that makes a dependent task wait for this one.
    pub fn as_arg(&self) -> Value {
        Value::Future(self.inner.task_id)
    }

    /// Futures of the output files declared with the task.
    pub fn outputs(&self) -> &[FutureHandle] {
        &self.inner.outputs
    }

    /// Publishes the outcome. Returns false if one was already set, in which
    /// case the stored outcome is unchanged.
    pub(crate) fn complete(&self, outcome: Outcome) -> bool {
        if self.inner.slot.set(outcome).is_err() {
            return false;
        }
        let _guard = self.inner.lock.lock().unwrap_or_else(|e| e.into_inner());
        self.inner.ready.notify_all();
        true
    }

    pub fn done(&self) -> bool {
        self.inner.slot.get().is_some()
    }

    /// Outcome if already available.
    pub fn peek(&self) -> Option<&Outcome> {
        self.inner.slot.get()
    }

    /// Blocks until the task reaches a terminal state.
    pub fn result(&self) -> Outcome {
        if let Some(v) = self.inner.slot.get() {
            return v.clone();
        }
        let mut guard = self.inner.lock.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(v) = self.inner.slot.get() {
                return v.clone();
            }
            guard = self
                .inner
                .ready
                .wait(guard)
                .unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Like [`result`](Self::result) but gives up after `timeout`.
    pub fn result_timeout(&self, timeout: Duration) -> Option<Outcome> {
        let deadline = Instant::now() + timeout;
        let mut guard = self.inner.lock.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(v) = self.inner.slot.get() {
                return Some(v.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            guard = self
                .inner
                .ready
                .wait_timeout(guard, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}
