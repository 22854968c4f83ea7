//! In-process executors.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Sender};

use super::{
    Completion, ExecTask, ExecutionKernel, Executor, ExecutorContext, ExecutorError, ExecutorStatus,
};
use crate::monitor::EventKind;

/// Thread-pool executor: `workers` threads pull attempts from one FIFO
/// queue.
pub struct LocalExecutor {
    label: String,
    workers: usize,
    kernel: ExecutionKernel,
    queue: Mutex<Option<Sender<ExecTask>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    pending: Arc<AtomicUsize>,
    status: Mutex<ExecutorStatus>,
    ctx: OnceLock<ExecutorContext>,
}

impl LocalExecutor {
    pub fn new(label: impl Into<String>, workers: usize, kernel: ExecutionKernel) -> Self {
        assert!(workers >= 1, "a local executor needs at least one worker");
        LocalExecutor {
            label: label.into(),
            workers,
            kernel,
            queue: Mutex::new(None),
            threads: Mutex::new(Vec::new()),
            pending: Arc::new(AtomicUsize::new(0)),
            status: Mutex::new(ExecutorStatus::Starting),
            ctx: OnceLock::new(),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }
}

impl Executor for LocalExecutor {
    fn label(&self) -> &str {
        &self.label
    }

    fn start(&self, ctx: ExecutorContext) -> Result<(), ExecutorError> {
        let (tx, rx) = unbounded::<ExecTask>();
        let mut threads = self.threads.lock().unwrap();
        for i in 0..self.workers {
            let rx = rx.clone();
            let kernel = self.kernel.clone();
            let ctx = ctx.clone();
            let pending = self.pending.clone();
            let location = format!("{}/{i}", self.label);
            let handle = std::thread::Builder::new()
                .name(format!("{}-worker-{i}", self.label))
                .spawn(move || {
                    for task in rx.iter() {
                        let started = ctx.clock().now_us();
                        let outcome = kernel.execute(
                            task.task_id,
                            task.attempt,
                            &task.app,
                            &task.args,
                            &task.kwargs,
                        );
                        let finished = ctx.clock().now_us();
                        pending.fetch_sub(1, Ordering::SeqCst);
                        (ctx.sink)(Completion {
                            task_id: task.task_id,
                            attempt: task.attempt,
                            outcome,
                            started_us: Some(started),
                            finished_us: Some(finished),
                            location: Some(location.clone()),
                        });
                    }
                })?;
            threads.push(handle);
        }
        if ctx.monitor.enabled() {
            ctx.monitor.emit(ctx.monitor.now(
                None,
                EventKind::Manager {
                    event: "registered".into(),
                    manager: self.label.clone(),
                    workers: self.workers,
                },
            ));
        }
        *self.queue.lock().unwrap() = Some(tx);
        *self.status.lock().unwrap() = ExecutorStatus::Running;
        let _ = self.ctx.set(ctx);
        Ok(())
    }

    fn submit_task(&self, task: ExecTask) -> Result<(), ExecutorError> {
        let queue = self.queue.lock().unwrap();
        let tx = queue
            .as_ref()
            .ok_or_else(|| ExecutorError::NotRunning(self.label.clone()))?;
        self.pending.fetch_add(1, Ordering::SeqCst);
        tx.send(task)
            .map_err(|_| ExecutorError::NotRunning(self.label.clone()))
    }

    fn pending_count(&self) -> usize {
        self.pending.load(Ordering::SeqCst)
    }

    fn status(&self) -> ExecutorStatus {
        *self.status.lock().unwrap()
    }

    /// Stops accepting work, lets queued attempts finish and joins the
    /// worker threads.
    fn shutdown(&self) -> Result<(), ExecutorError> {
        let tx = self.queue.lock().unwrap().take();
        if tx.is_none() {
            return Ok(());
        }
        *self.status.lock().unwrap() = ExecutorStatus::Draining;
        drop(tx);
        for t in self.threads.lock().unwrap().drain(..) {
            let _ = t.join();
        }
        if let Some(ctx) = self.ctx.get() {
            if ctx.monitor.enabled() {
                ctx.monitor.emit(ctx.monitor.now(
                    None,
                    EventKind::Manager {
                        event: "exited".into(),
                        manager: self.label.clone(),
                        workers: self.workers,
                    },
                ));
            }
        }
        *self.status.lock().unwrap() = ExecutorStatus::Stopped;
        Ok(())
    }
}

/// Runs each attempt synchronously inside `submit_task`. Useful for
/// measuring engine overhead without any transport in the way.
pub struct InlineExecutor {
    label: String,
    kernel: ExecutionKernel,
    ctx: OnceLock<ExecutorContext>,
    stopped: Mutex<bool>,
}

impl InlineExecutor {
    pub fn new(label: impl Into<String>, kernel: ExecutionKernel) -> Self {
        InlineExecutor {
            label: label.into(),
            kernel,
            ctx: OnceLock::new(),
            stopped: Mutex::new(false),
        }
    }
}

impl Executor for InlineExecutor {
    fn label(&self) -> &str {
        &self.label
    }

    fn start(&self, ctx: ExecutorContext) -> Result<(), ExecutorError> {
        if ctx.monitor.enabled() {
            ctx.monitor.emit(ctx.monitor.now(
                None,
                EventKind::Manager {
                    event: "registered".into(),
                    manager: self.label.clone(),
                    workers: 1,
                },
            ));
        }
        let _ = self.ctx.set(ctx);
        Ok(())
    }

    fn submit_task(&self, task: ExecTask) -> Result<(), ExecutorError> {
        let ctx = self
            .ctx
            .get()
            .filter(|_| !*self.stopped.lock().unwrap())
            .ok_or_else(|| ExecutorError::NotRunning(self.label.clone()))?;
        let started = ctx.clock().now_us();
        let outcome = self.kernel.execute(
            task.task_id,
            task.attempt,
            &task.app,
            &task.args,
            &task.kwargs,
        );
        let finished = ctx.clock().now_us();
        (ctx.sink)(Completion {
            task_id: task.task_id,
            attempt: task.attempt,
            outcome,
            started_us: Some(started),
            finished_us: Some(finished),
            location: Some(format!("{}/0", self.label)),
        });
        Ok(())
    }

    fn pending_count(&self) -> usize {
        0
    }

    fn status(&self) -> ExecutorStatus {
        match (self.ctx.get(), *self.stopped.lock().unwrap()) {
            (_, true) => ExecutorStatus::Stopped,
            (None, false) => ExecutorStatus::Starting,
            (Some(_), false) => ExecutorStatus::Running,
        }
    }

    fn shutdown(&self) -> Result<(), ExecutorError> {
        *self.stopped.lock().unwrap() = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::Registry;
    use crate::value::{Kwargs, TaskId, Value};
    use std::time::{Duration, Instant};

    fn task(reg: &Registry, id: u64, app: &str, args: Vec<Value>) -> ExecTask {
        ExecTask {
            task_id: TaskId(id),
            attempt: 0,
            app: reg.app(app).unwrap(),
            args,
            kwargs: Kwargs::new(),
        }
    }

    fn collecting(exec: &dyn Executor) -> Arc<Mutex<Vec<Completion>>> {
        let done = Arc::new(Mutex::new(Vec::new()));
        let sink_done = done.clone();
        let mut ctx = ExecutorContext::detached();
        ctx.sink = Arc::new(move |c| sink_done.lock().unwrap().push(c));
        exec.start(ctx).unwrap();
        done
    }

    fn kernel(reg: &Registry) -> ExecutionKernel {
        ExecutionKernel::new(Arc::new(reg.clone()), std::env::temp_dir())
    }

    #[test]
    fn single_worker_is_fifo() {
        let reg = Registry::with_builtins();
        let exec = LocalExecutor::new("local", 1, kernel(&reg));
        let done = collecting(&exec);
        exec.submit_task(task(&reg, 0, "sleep", vec![Value::Int(30)]))
            .unwrap();
        exec.submit_task(task(&reg, 1, "sleep", vec![Value::Int(1)]))
            .unwrap();
        exec.shutdown().unwrap();
        let done = done.lock().unwrap();
        assert_eq!(done[0].task_id, TaskId(0));
        assert!(done[0].finished_us.unwrap() <= done[1].started_us.unwrap());
    }

    #[test]
    fn four_workers_run_in_parallel() {
        let reg = Registry::with_builtins();
        let exec = LocalExecutor::new("local", 4, kernel(&reg));
        let done = collecting(&exec);
        let t0 = Instant::now();
        for i in 0..4 {
            exec.submit_task(task(&reg, i, "sleep", vec![Value::Int(200)]))
                .unwrap();
        }
        exec.shutdown().unwrap();
        assert!(t0.elapsed() < Duration::from_millis(400));
        assert_eq!(done.lock().unwrap().len(), 4);
    }

    #[test]
    fn submit_after_shutdown_is_rejected() {
        let reg = Registry::with_builtins();
        let exec = LocalExecutor::new("local", 1, kernel(&reg));
        let _done = collecting(&exec);
        exec.shutdown().unwrap();
        assert_eq!(exec.status(), ExecutorStatus::Stopped);
        assert!(exec.submit_task(task(&reg, 0, "noop", vec![])).is_err());

        let inline = InlineExecutor::new("inline", kernel(&reg));
        let _done = collecting(&inline);
        inline.shutdown().unwrap();
        assert!(inline.submit_task(task(&reg, 0, "noop", vec![])).is_err());
    }
}
