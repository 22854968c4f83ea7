//! The dataflow kernel: owns the task graph and drives every task from
//! submission to a terminal state.
//!
//! Client threads call [`DataFlowKernel::submit`], which allocates task ids,
//! rewrites remote file arguments into stage-task futures and queues the
//! new nodes. A single event-loop thread owns the graph; executor
//! completions reach it as events from whatever thread produced them.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::app::{AppSpec, Registry};
use crate::builtins::STAGE_HTTP;
use crate::checkpoint::{load_checkpoints, CheckpointError, CheckpointWriter};
use crate::data::{resolve_files, StagingCache};
use crate::executor::{Completion, ExecTask, Executor, ExecutorContext, ExecutorError};
use crate::future::{FutureHandle, Outcome};
use crate::memo::{memo_key, MemoTable};
use crate::monitor::{EventKind, Monitor, MonitorEvent};
use crate::task::{TaskError, TaskRecord, TaskRole, TaskState};
use crate::value::{FileRef, Kwargs, TaskId, Value};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Seeds the executor-selection stream.
    pub seed: u64,
    /// Default retry budget per task.
    pub retries: u32,
    /// Default memoization flag per task.
    pub memoize: bool,
    /// Checkpoint files loaded into the memo table at start.
    pub checkpoint_files: Vec<PathBuf>,
    /// File that successful memoizable tasks are appended to.
    pub checkpoint_path: Option<PathBuf>,
    /// Per-attempt timeout; disabled when `None`.
    pub task_timeout: Option<Duration>,
    /// Root under which stage tasks download, one directory per executor.
    pub staging_dir: PathBuf,
    pub registry: Arc<Registry>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            retries: 0,
            memoize: false,
            checkpoint_files: Vec::new(),
            checkpoint_path: None,
            task_timeout: None,
            staging_dir: std::env::temp_dir().join("pilotflow-staging"),
            registry: Arc::new(Registry::with_builtins()),
        }
    }
}

/// A task invocation under construction.
#[derive(Debug, Clone)]
pub struct Call {
    pub app: AppSpec,
    pub args: Vec<Value>,
    pub kwargs: Kwargs,
    pub executor: Option<String>,
    pub outputs: Vec<PathBuf>,
    pub memoize: Option<bool>,
    pub retries: Option<u32>,
}

impl Call {
    pub fn new(app: AppSpec) -> Self {
        Call {
            app,
            args: Vec::new(),
            kwargs: Kwargs::new(),
            executor: None,
            outputs: Vec::new(),
            memoize: None,
            retries: None,
        }
    }

    pub fn arg(mut self, v: impl Into<Value>) -> Self {
        self.args.push(v.into());
        self
    }

    pub fn args(mut self, args: impl IntoIterator<Item = Value>) -> Self {
        self.args.extend(args);
        self
    }

    pub fn kwarg(mut self, key: &str, v: impl Into<Value>) -> Self {
        self.kwargs.insert(key.to_string(), v.into());
        self
    }

    /// Pins the task to the executor with this label.
    pub fn on(mut self, label: impl Into<String>) -> Self {
        self.executor = Some(label.into());
        self
    }

    /// Declares a file the task will create. The returned future exposes
    /// one output future per declaration, in order.
    pub fn output(mut self, path: impl Into<PathBuf>) -> Self {
        self.outputs.push(path.into());
        self
    }

    pub fn memoize(mut self, on: bool) -> Self {
        self.memoize = Some(on);
        self
    }

    pub fn retries(mut self, n: u32) -> Self {
        self.retries = Some(n);
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SubmitError {
    #[error("unknown app `{0}`")]
    UnknownApp(String),
    #[error("engine has shut down")]
    EngineShutdown,
    #[error("output {0} is already declared by another task")]
    DuplicateOutput(PathBuf),
    #[error("argument refers to task {0}, which this engine did not create")]
    UnknownFuture(TaskId),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("at least one executor is required")]
    NoExecutors,
    #[error("duplicate executor label `{0}`")]
    DuplicateLabel(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("executor {label}: {source}")]
    Executor {
        label: String,
        source: ExecutorError,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Summary {
    pub succeeded: u64,
    pub failed: u64,
    pub memo_hits: u64,
}

impl Summary {
    pub fn total(&self) -> u64 {
        self.succeeded + self.failed + self.memo_hits
    }
}

/// Post-hoc view of one graph node.
#[derive(Debug, Clone)]
pub struct TaskSummary {
    pub task_id: TaskId,
    pub app: String,
    pub role: TaskRole,
    pub state: TaskState,
    pub executor: Option<String>,
    pub launches: u32,
    pub depends_on: Vec<TaskId>,
    pub submit_time: u64,
    pub first_launch_time: Option<u64>,
    pub launch_time: Option<u64>,
    pub complete_time: Option<u64>,
    pub location: Option<String>,
}

#[derive(Default)]
struct Counts {
    submitted: u64,
    summary: Summary,
}

struct SubmitState {
    next_id: u64,
    rng: ChaCha8Rng,
    outputs: HashSet<PathBuf>,
    closed: bool,
}

struct Shared {
    tx: Sender<Event>,
    submit: Mutex<SubmitState>,
    staging: StagingCache,
    labels: Vec<String>,
    counts: Mutex<Counts>,
    settled: Condvar,
    submissions: Vec<AtomicU64>,
    loop_busy_ns: AtomicU64,
}

struct NewTask {
    rec: TaskRecord,
    handle: FutureHandle,
    executor: Result<usize, String>,
}

enum Event {
    Submit(Vec<NewTask>),
    Completion(Completion),
    Inspect(Sender<Vec<TaskSummary>>),
    Shutdown,
}

pub struct DataFlowKernel {
    shared: Arc<Shared>,
    config: EngineConfig,
    executors: Vec<Arc<dyn Executor>>,
    monitor: Monitor,
    event_loop: Mutex<Option<JoinHandle<()>>>,
    stopped: AtomicBool,
}

impl DataFlowKernel {
    /// Loads checkpoints, starts every executor and the event loop.
    pub fn start(
        config: EngineConfig,
        executors: Vec<Arc<dyn Executor>>,
        monitor: Monitor,
    ) -> Result<DataFlowKernel, EngineError> {
        if executors.is_empty() {
            return Err(EngineError::NoExecutors);
        }
        let mut labels = Vec::new();
        for e in &executors {
            if labels.iter().any(|l| l == e.label()) {
                return Err(EngineError::DuplicateLabel(e.label().to_string()));
            }
            labels.push(e.label().to_string());
        }
        let memo = load_checkpoints(&config.checkpoint_files)?;
        let checkpoint = config
            .checkpoint_path
            .as_ref()
            .map(CheckpointWriter::open)
            .transpose()?;
        tracing::info!(
            seed = config.seed,
            executors = ?labels,
            memo_entries = memo.len(),
            "engine starting"
        );

        let (tx, rx) = unbounded();
        let shared = Arc::new(Shared {
            tx: tx.clone(),
            submit: Mutex::new(SubmitState {
                next_id: 0,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                outputs: HashSet::new(),
                closed: false,
            }),
            staging: StagingCache::new(),
            submissions: labels.iter().map(|_| AtomicU64::new(0)).collect(),
            labels,
            counts: Mutex::new(Counts::default()),
            settled: Condvar::new(),
            loop_busy_ns: AtomicU64::new(0),
        });

        let sink_tx = tx;
        let ctx = ExecutorContext {
            sink: Arc::new(move |c| {
                let _ = sink_tx.send(Event::Completion(c));
            }),
            monitor: monitor.clone(),
        };
        for (i, e) in executors.iter().enumerate() {
            if let Err(source) = e.start(ctx.clone()) {
                for started in &executors[..i] {
                    let _ = started.shutdown();
                }
                return Err(EngineError::Executor {
                    label: e.label().to_string(),
                    source,
                });
            }
        }

        let mut engine_loop = EngineLoop {
            nodes: Vec::new(),
            memo,
            checkpoint,
            shared: shared.clone(),
            executors: executors.clone(),
            monitor: monitor.clone(),
            timeout: config.task_timeout,
            deadlines: BinaryHeap::new(),
            settled: VecDeque::new(),
        };
        let handle = std::thread::Builder::new()
            .name("dfk-loop".into())
            .spawn(move || engine_loop.run(rx))
            .expect("spawn engine loop");

        Ok(DataFlowKernel {
            shared,
            config,
            executors,
            monitor,
            event_loop: Mutex::new(Some(handle)),
            stopped: AtomicBool::new(false),
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.config.registry
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn executors(&self) -> &[Arc<dyn Executor>] {
        &self.executors
    }

    pub fn executor(&self, label: &str) -> Option<&Arc<dyn Executor>> {
        self.executors.iter().find(|e| e.label() == label)
    }

    /// App spec for a registered function.
    pub fn app(&self, name: &str) -> Result<AppSpec, SubmitError> {
        self.config
            .registry
            .app(name)
            .map_err(|_| SubmitError::UnknownApp(name.to_string()))
    }

    /// Shorthand for submitting a registered function with positional
    /// arguments.
    pub fn call(&self, name: &str, args: Vec<Value>) -> Result<FutureHandle, SubmitError> {
        self.submit(Call::new(self.app(name)?).args(args))
    }

    /// Registers a task and returns its future without waiting.
    pub fn submit(&self, call: Call) -> Result<FutureHandle, SubmitError> {
        if call.app.is_native() && !self.config.registry.contains(&call.app.name) {
            return Err(SubmitError::UnknownApp(call.app.name.clone()));
        }
        let shared = &self.shared;
        let now = self.monitor.clock().now_us();
        let mut st = shared.submit.lock().unwrap();
        if st.closed {
            return Err(SubmitError::EngineShutdown);
        }

        let cwd = std::env::current_dir().unwrap_or_default();
        let outputs: Vec<PathBuf> = call.outputs.iter().map(|p| cwd.join(p)).collect();
        let mut seen = HashSet::new();
        for p in &outputs {
            if st.outputs.contains(p) || !seen.insert(p.clone()) {
                return Err(SubmitError::DuplicateOutput(p.clone()));
            }
        }
        let mut probe = Vec::new();
        call.args
            .iter()
            .chain(call.kwargs.values())
            .for_each(|v| v.collect_futures(&mut probe));
        if let Some(bad) = probe.into_iter().find(|t| t.0 >= st.next_id) {
            return Err(SubmitError::UnknownFuture(bad));
        }

        let executor: Result<usize, String> = match &call.executor {
            Some(label) => shared
                .labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| label.clone()),
            None => Ok(st.rng.gen_range(0..shared.labels.len())),
        };
        let label = match &executor {
            Ok(i) => shared.labels[*i].clone(),
            Err(l) => l.clone(),
        };
        let retries = call.retries.unwrap_or(self.config.retries);
        let memoize = call.memoize.unwrap_or(self.config.memoize);

        let mut batch: Vec<NewTask> = Vec::new();
        let stage_app = self.config.registry.app(STAGE_HTTP).ok();
        let stage_dir = self.config.staging_dir.join(&label);
        let args;
        let mut kwargs;
        {
            let st = &mut *st;
            let mut stage = |f: &FileRef| -> TaskId {
                let id = TaskId(st.next_id);
                st.next_id += 1;
                let app = stage_app.clone().expect("stage app is a builtin");
                batch.push(NewTask {
                    rec: TaskRecord {
                        task_id: id,
                        app,
                        args: vec![
                            Value::File(f.clone()),
                            Value::str(stage_dir.to_string_lossy()),
                        ],
                        kwargs: Kwargs::new(),
                        depends_on: Default::default(),
                        state: TaskState::Pending,
                        retries_left: retries,
                        executor_hint: call.executor.clone(),
                        memoize: false,
                        role: TaskRole::Stage { uri: f.uri.clone() },
                        submit_time: now,
                        launch_time: None,
                        complete_time: None,
                    },
                    handle: FutureHandle::new(id, vec![]),
                    executor: executor.clone(),
                });
                id
            };
            args = call
                .args
                .iter()
                .map(|v| resolve_files(v, &label, &shared.staging, &mut stage))
                .collect::<Vec<_>>();
            kwargs = call
                .kwargs
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        resolve_files(v, &label, &shared.staging, &mut stage),
                    )
                })
                .collect::<Kwargs>();
        }
        if !outputs.is_empty() && !kwargs.contains_key("outputs") {
            kwargs.insert(
                "outputs".into(),
                Value::List(
                    outputs
                        .iter()
                        .map(|p| Value::File(FileRef::local(p)))
                        .collect(),
                ),
            );
        }

        let id = TaskId(st.next_id);
        st.next_id += 1;
        let depends_on = TaskRecord::derive_dependencies(&args, &kwargs);
        let mut output_tasks = Vec::new();
        for path in &outputs {
            let oid = TaskId(st.next_id);
            st.next_id += 1;
            st.outputs.insert(path.clone());
            output_tasks.push(NewTask {
                rec: TaskRecord {
                    task_id: oid,
                    app: AppSpec::shell("output", ""),
                    args: vec![Value::Future(id)],
                    kwargs: Kwargs::new(),
                    depends_on: [id].into_iter().collect(),
                    state: TaskState::Pending,
                    retries_left: 0,
                    executor_hint: None,
                    memoize: false,
                    role: TaskRole::Output {
                        producer: id,
                        path: path.clone(),
                    },
                    submit_time: now,
                    launch_time: None,
                    complete_time: None,
                },
                handle: FutureHandle::new(oid, vec![]),
                executor: Err(String::new()),
            });
        }
        let handle = FutureHandle::new(id, output_tasks.iter().map(|t| t.handle.clone()).collect());
        batch.push(NewTask {
            rec: TaskRecord {
                task_id: id,
                app: call.app,
                args,
                kwargs,
                depends_on,
                state: TaskState::Pending,
                retries_left: retries,
                executor_hint: call.executor,
                memoize,
                role: TaskRole::App,
                submit_time: now,
                launch_time: None,
                complete_time: None,
            },
            handle: handle.clone(),
            executor,
        });
        batch.extend(output_tasks);

        shared.counts.lock().unwrap().submitted += batch.len() as u64;
        shared
            .tx
            .send(Event::Submit(batch))
            .map_err(|_| SubmitError::EngineShutdown)?;
        Ok(handle)
    }

    /// Blocks until every submitted task is terminal.
    pub fn wait_all(&self) -> Summary {
        let mut counts = self.shared.counts.lock().unwrap();
        while counts.summary.total() < counts.submitted {
            counts = self.shared.settled.wait(counts).unwrap();
        }
        counts.summary
    }

    /// Like [`wait_all`](Self::wait_all) with a deadline; `None` on timeout.
    pub fn wait_all_timeout(&self, timeout: Duration) -> Option<Summary> {
        let deadline = Instant::now() + timeout;
        let mut counts = self.shared.counts.lock().unwrap();
        while counts.summary.total() < counts.submitted {
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            counts = self
                .shared
                .settled
                .wait_timeout(counts, deadline - now)
                .unwrap()
                .0;
        }
        Some(counts.summary)
    }

    pub fn summary(&self) -> Summary {
        self.shared.counts.lock().unwrap().summary
    }

    pub fn submitted(&self) -> u64 {
        self.shared.counts.lock().unwrap().submitted
    }

    /// Attempts handed to each executor so far.
    pub fn submissions(&self) -> BTreeMap<String, u64> {
        self.shared
            .labels
            .iter()
            .zip(&self.shared.submissions)
            .map(|(l, n)| (l.clone(), n.load(Ordering::SeqCst)))
            .collect()
    }

    pub fn total_submissions(&self) -> u64 {
        self.shared
            .submissions
            .iter()
            .map(|n| n.load(Ordering::SeqCst))
            .sum()
    }

    /// CPU time the event loop thread has spent processing events.
    pub fn loop_busy(&self) -> Duration {
        Duration::from_nanos(self.shared.loop_busy_ns.load(Ordering::SeqCst))
    }

    /// Snapshot of every graph node, in task id order.
    pub fn tasks(&self) -> Vec<TaskSummary> {
        let (tx, rx) = unbounded();
        if self.shared.tx.send(Event::Inspect(tx)).is_err() {
            return Vec::new();
        }
        rx.recv().unwrap_or_default()
    }

    /// Stops the event loop and the executors. Tasks that are not terminal
    /// yet fail with a rejection error.
    pub fn shutdown(&self) {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.shared.submit.lock().unwrap().closed = true;
        let _ = self.shared.tx.send(Event::Shutdown);
        if let Some(h) = self.event_loop.lock().unwrap().take() {
            let _ = h.join();
        }
        for e in &self.executors {
            if let Err(err) = e.shutdown() {
                tracing::warn!(executor = e.label(), "shutdown failed: {err}");
            }
        }
        self.monitor.flush();
        tracing::info!(summary = ?self.summary(), "engine stopped");
    }
}

impl Drop for DataFlowKernel {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Node {
    rec: TaskRecord,
    handle: FutureHandle,
    executor: Result<usize, String>,
    unresolved: usize,
    dependents: Vec<TaskId>,
    attempt: u32,
    launches: u32,
    memo_key: Option<String>,
    first_launch: Option<u64>,
    location: Option<String>,
}

struct EngineLoop {
    nodes: Vec<Node>,
    memo: MemoTable,
    checkpoint: Option<CheckpointWriter>,
    shared: Arc<Shared>,
    executors: Vec<Arc<dyn Executor>>,
    monitor: Monitor,
    timeout: Option<Duration>,
    deadlines: BinaryHeap<Reverse<(Instant, u64, u32)>>,
    /// Nodes that just became terminal and whose dependents still need to
    /// hear about it.
    settled: VecDeque<TaskId>,
}

/// CPU time consumed by the calling thread.
fn thread_cpu_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: clock_gettime writes into the timespec we own.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0;
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

impl EngineLoop {
    fn run(&mut self, rx: Receiver<Event>) {
        loop {
            let event = match self.deadlines.peek() {
                Some(Reverse((at, _, _))) => {
                    match rx.recv_timeout(at.saturating_duration_since(Instant::now())) {
                        Ok(e) => Some(e),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => return,
                    }
                }
                None => match rx.recv() {
                    Ok(e) => Some(e),
                    Err(_) => return,
                },
            };
            let t0 = thread_cpu_ns();
            let keep_going = match event {
                Some(e) => self.handle(e),
                None => {
                    self.expire_deadlines();
                    true
                }
            };
            self.drain_settled();
            self.shared
                .loop_busy_ns
                .fetch_add(thread_cpu_ns().saturating_sub(t0), Ordering::Relaxed);
            if !keep_going {
                return;
            }
        }
    }

    fn handle(&mut self, event: Event) -> bool {
        match event {
            Event::Submit(batch) => {
                for t in batch {
                    self.add(t);
                }
            }
            Event::Completion(c) => self.complete(c),
            Event::Inspect(reply) => {
                let _ = reply.send(self.nodes.iter().map(|n| self.summarize(n)).collect());
            }
            Event::Shutdown => {
                self.abandon();
                return false;
            }
        }
        true
    }

    fn now(&self) -> u64 {
        self.monitor.clock().now_us()
    }

    fn node(&mut self, id: TaskId) -> &mut Node {
        &mut self.nodes[id.0 as usize]
    }

    fn emit(&self, event: MonitorEvent) {
        self.monitor.emit(event);
    }

    fn set_state(&mut self, id: TaskId, to: TaskState, ts: u64, detail: &[(&str, String)]) {
        let node = &mut self.nodes[id.0 as usize];
        let from = node.rec.state;
        debug_assert!(from.can_transition(to), "task {id}: {from} -> {to}");
        node.rec.state = to;
        if self.monitor.enabled() {
            let mut e = MonitorEvent::new(
                ts,
                Some(id),
                EventKind::StateChange {
                    from: Some(from),
                    to,
                },
            );
            for (k, v) in detail {
                e = e.with(k, v);
            }
            self.emit(e);
        }
    }

    fn add(&mut self, t: NewTask) {
        let id = t.rec.task_id;
        assert_eq!(
            id.0 as usize,
            self.nodes.len(),
            "task ids arrive densely and in order"
        );
        if self.monitor.enabled() {
            let mut e = MonitorEvent::new(
                t.rec.submit_time,
                Some(id),
                EventKind::StateChange {
                    from: None,
                    to: TaskState::Pending,
                },
            )
            .with("app", &t.rec.app.name);
            if let TaskRole::Stage { uri } = &t.rec.role {
                e = e.with("stage", uri);
            }
            self.emit(e);
        }
        let mut unresolved = 0;
        let mut failed_dep = None;
        for dep in &t.rec.depends_on {
            let d = &mut self.nodes[dep.0 as usize];
            match d.rec.state {
                TaskState::Succeeded | TaskState::MemoHit => {}
                TaskState::Failed if d.handle.done() => {
                    failed_dep.get_or_insert(*dep);
                }
                _ => {
                    d.dependents.push(id);
                    unresolved += 1;
                }
            }
        }
        self.nodes.push(Node {
            rec: t.rec,
            handle: t.handle,
            executor: t.executor,
            unresolved,
            dependents: Vec::new(),
            attempt: 0,
            launches: 0,
            memo_key: None,
            first_launch: None,
            location: None,
        });
        if let Some(dep) = failed_dep {
            self.fail_from_dependency(id, dep);
        } else if unresolved == 0 {
            self.ready(id);
        }
    }

    /// All dependencies succeeded: substitute their values and either
    /// answer from the memo table or launch.
    fn ready(&mut self, id: TaskId) {
        let node = &self.nodes[id.0 as usize];
        let resolve = |t: TaskId| match self.nodes[t.0 as usize].handle.peek() {
            Some(Ok(v)) => v.clone(),
            _ => Value::Future(t),
        };
        let args: Vec<Value> = node
            .rec
            .args
            .iter()
            .map(|v| v.substitute(&resolve))
            .collect();
        let kwargs: Kwargs = node
            .rec
            .kwargs
            .iter()
            .map(|(k, v)| (k.clone(), v.substitute(&resolve)))
            .collect();
        let memoize = node.rec.memoize;
        let key = if memoize {
            memo_key(&node.rec.app, &args, &kwargs).ok()
        } else {
            None
        };
        let node = self.node(id);
        node.rec.args = args;
        node.rec.kwargs = kwargs;
        node.memo_key = key.clone();

        if let TaskRole::Output { producer, path } = node.rec.role.clone() {
            self.settle_output(id, producer, path);
            return;
        }
        if let Some(value) = key.as_ref().and_then(|k| self.memo.lookup(k)).cloned() {
            let now = self.now();
            self.set_state(id, TaskState::MemoHit, now, &[]);
            self.node(id).rec.complete_time = Some(now);
            self.publish(id, Ok(value));
            return;
        }
        let now = self.now();
        self.set_state(id, TaskState::Launchable, now, &[]);
        self.launch(id);
    }

    fn settle_output(&mut self, id: TaskId, producer: TaskId, path: PathBuf) {
        let now = self.now();
        self.set_state(id, TaskState::Launchable, now, &[]);
        self.set_state(id, TaskState::Launched, now, &[]);
        self.set_state(id, TaskState::Running, now, &[]);
        let outcome = if path.exists() {
            Ok(Value::File(FileRef {
                local_path: Some(path.clone()),
                staged: true,
                ..FileRef::local(&path)
            }))
        } else {
            Err(TaskError::OutputMissing {
                path: path.clone(),
                reason: format!("task {producer} finished without creating it"),
            })
        };
        self.finish(id, outcome, now, None);
    }

    fn launch(&mut self, id: TaskId) {
        let now = self.now();
        let node = &mut self.nodes[id.0 as usize];
        let exec_index = match &node.executor {
            Ok(i) => *i,
            Err(label) => {
                let err = TaskError::UnknownExecutor(label.clone());
                self.set_state(id, TaskState::Failed, now, &[("error", err.to_string())]);
                self.publish(id, Err(err));
                return;
            }
        };
        node.launches += 1;
        node.rec.launch_time = Some(now);
        node.first_launch.get_or_insert(now);
        let task = ExecTask {
            task_id: id,
            attempt: node.attempt,
            app: node.rec.app.clone(),
            args: node.rec.args.clone(),
            kwargs: node.rec.kwargs.clone(),
        };
        let stage_uri = match &node.rec.role {
            TaskRole::Stage { uri } => Some(uri.clone()),
            _ => None,
        };
        let exec = self.executors[exec_index].clone();
        let label = exec.label().to_string();
        self.set_state(id, TaskState::Launched, now, &[("executor", label.clone())]);
        if self.monitor.enabled() {
            self.emit(MonitorEvent::new(
                now,
                Some(id),
                EventKind::Dispatch {
                    executor: label.clone(),
                },
            ));
            if let Some(uri) = stage_uri {
                self.emit(MonitorEvent::new(
                    now,
                    Some(id),
                    EventKind::Stage {
                        uri,
                        phase: "start".into(),
                    },
                ));
            }
        }
        self.shared.submissions[exec_index].fetch_add(1, Ordering::SeqCst);
        if let Some(t) = self.timeout {
            self.deadlines
                .push(Reverse((Instant::now() + t, id.0, task.attempt)));
        }
        let attempt = task.attempt;
        if let Err(e) = exec.submit_task(task) {
            self.complete(Completion {
                task_id: id,
                attempt,
                outcome: Err(TaskError::Rejected(e.to_string())),
                started_us: None,
                finished_us: None,
                location: None,
            });
        }
    }

    fn complete(&mut self, c: Completion) {
        let Some(node) = self.nodes.get(c.task_id.0 as usize) else {
            tracing::warn!(task = %c.task_id, "completion for unknown task");
            return;
        };
        let live = matches!(node.rec.state, TaskState::Launched | TaskState::Running);
        if !live || node.attempt != c.attempt {
            tracing::debug!(task = %c.task_id, attempt = c.attempt, "stale completion ignored");
            return;
        }
        let id = c.task_id;
        let now = self.now();
        let launched_at = node.rec.launch_time.unwrap_or(0);
        let mut run_end = None;
        let started = c.started_us.or(c.outcome.is_ok().then_some(now));
        if let Some(started) = started {
            let started = started.clamp(launched_at, now);
            let finished = c.finished_us.unwrap_or(now).clamp(started, now);
            run_end = Some(finished);
            let worker = c.location.clone().unwrap_or_default();
            self.set_state(id, TaskState::Running, started, &[("worker", worker)]);
        }
        self.node(id).location = c.location.clone();

        let failed = c.outcome.is_err();
        if failed && self.nodes[id.0 as usize].rec.retries_left > 0 {
            let err = c.outcome.unwrap_err();
            let mut detail = vec![("error", err.to_string())];
            if let Some(end) = run_end {
                detail.push(("run_end", end.to_string()));
            }
            self.set_state(id, TaskState::Failed, now, &detail);
            let node = self.node(id);
            node.rec.retries_left -= 1;
            node.attempt += 1;
            let attempt = node.attempt;
            tracing::debug!(task = %id, attempt, "retrying: {err}");
            self.set_state(id, TaskState::Retrying, now, &[]);
            self.set_state(id, TaskState::Launchable, now, &[]);
            self.launch(id);
            return;
        }
        self.finish(id, c.outcome, now, run_end);
    }

    /// Moves a launched or running task to its terminal state.
    fn finish(&mut self, id: TaskId, outcome: Outcome, now: u64, run_end: Option<u64>) {
        let mut detail = Vec::new();
        if let Some(end) = run_end {
            detail.push(("run_end", end.to_string()));
        }
        let to = match &outcome {
            Ok(_) => TaskState::Succeeded,
            Err(e) => {
                detail.push(("error", e.to_string()));
                TaskState::Failed
            }
        };
        self.set_state(id, to, now, &detail);
        self.node(id).rec.complete_time = Some(now);
        let node = &self.nodes[id.0 as usize];
        if let TaskRole::Stage { uri } = &node.rec.role {
            if self.monitor.enabled() {
                let phase = if outcome.is_ok() { "done" } else { "failed" };
                self.emit(MonitorEvent::new(
                    now,
                    Some(id),
                    EventKind::Stage {
                        uri: uri.clone(),
                        phase: phase.into(),
                    },
                ));
            }
        }
        if let (Ok(v), Some(key)) = (&outcome, &node.memo_key) {
            self.memo.insert(key.clone(), v.clone());
            if let Some(w) = &self.checkpoint {
                if let Err(e) = w.append(key, v, now) {
                    tracing::error!("checkpoint write failed: {e}");
                }
            }
        }
        self.publish(id, outcome);
    }

    /// A dependency of the pending task `id` failed.
    fn fail_from_dependency(&mut self, id: TaskId, dep: TaskId) {
        let cause = match self.nodes[dep.0 as usize].handle.peek() {
            Some(Err(e)) => e.clone(),
            _ => TaskError::app("dependency failed"),
        };
        let err = match &self.nodes[id.0 as usize].rec.role {
            TaskRole::Output { path, .. } => TaskError::OutputMissing {
                path: path.clone(),
                reason: format!("task {dep} failed: {cause}"),
            },
            _ => {
                let (root, cause) = match cause {
                    TaskError::Dependency { root, cause, .. } => (root, cause),
                    other => (dep, other.to_string()),
                };
                TaskError::Dependency {
                    dependency: dep,
                    root,
                    cause,
                }
            }
        };
        let now = self.now();
        self.set_state(id, TaskState::Failed, now, &[("error", err.to_string())]);
        self.node(id).rec.complete_time = Some(now);
        self.publish(id, Err(err));
    }

    /// Publishes a terminal outcome and queues the dependents.
    fn publish(&mut self, id: TaskId, outcome: Outcome) {
        let state = self.nodes[id.0 as usize].rec.state;
        self.nodes[id.0 as usize].handle.complete(outcome);
        {
            let mut counts = self.shared.counts.lock().unwrap();
            match state {
                TaskState::Succeeded => counts.summary.succeeded += 1,
                TaskState::MemoHit => counts.summary.memo_hits += 1,
                _ => counts.summary.failed += 1,
            }
            if counts.summary.total() >= counts.submitted {
                self.shared.settled.notify_all();
            }
        }
        self.settled.push_back(id);
    }

    fn drain_settled(&mut self) {
        while let Some(done) = self.settled.pop_front() {
            let success = self.nodes[done.0 as usize].rec.state.is_success();
            let dependents = std::mem::take(&mut self.nodes[done.0 as usize].dependents);
            for d in dependents {
                if self.nodes[d.0 as usize].rec.state != TaskState::Pending {
                    continue;
                }
                if !success {
                    self.fail_from_dependency(d, done);
                    continue;
                }
                let node = self.node(d);
                node.unresolved -= 1;
                if node.unresolved == 0 {
                    self.ready(d);
                }
            }
        }
    }

    fn expire_deadlines(&mut self) {
        let now = Instant::now();
        while let Some(Reverse((at, id, attempt))) = self.deadlines.peek().copied() {
            if at > now {
                break;
            }
            self.deadlines.pop();
            self.complete(Completion {
                task_id: TaskId(id),
                attempt,
                outcome: Err(TaskError::Timeout),
                started_us: None,
                finished_us: None,
                location: None,
            });
        }
    }

    /// Fails everything that is not terminal yet.
    fn abandon(&mut self) {
        let now = self.now();
        for i in 0..self.nodes.len() {
            let id = TaskId(i as u64);
            if self.nodes[i].handle.done() {
                continue;
            }
            let err = TaskError::Rejected("engine shut down".into());
            self.set_state(id, TaskState::Failed, now, &[("error", err.to_string())]);
            self.publish(id, Err(err));
        }
        self.settled.clear();
    }

    fn summarize(&self, n: &Node) -> TaskSummary {
        TaskSummary {
            task_id: n.rec.task_id,
            app: n.rec.app.name.clone(),
            role: n.rec.role.clone(),
            state: n.rec.state,
            executor: n
                .executor
                .as_ref()
                .ok()
                .map(|i| self.shared.labels[*i].clone()),
            launches: n.launches,
            depends_on: n.rec.depends_on.iter().copied().collect(),
            submit_time: n.rec.submit_time,
            first_launch_time: n.first_launch,
            launch_time: n.rec.launch_time,
            complete_time: n.rec.complete_time,
            location: n.location.clone(),
        }
    }
}
