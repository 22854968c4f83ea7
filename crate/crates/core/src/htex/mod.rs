//! High-throughput pilot-job executor.
//!
//! The client (this process) talks to a separate interchange process, which
//! matches queued tasks to managers. Managers are started inside provider
//! blocks, one per node, and each runs a pool of worker processes.

pub mod interchange;
pub mod manager;
pub mod worker;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::agent::AgentCommand;
use crate::elasticity::LoadSnapshot;
use crate::executor::{
    Completion, ExecTask, Executor, ExecutorContext, ExecutorError, ExecutorStatus,
};
use crate::monitor::EventKind;
use crate::provider::{BlockState, JobHandle, Provider};
use crate::task::TaskError;
use crate::value::{TaskId, Value};
use crate::wire::{
    batch_entries, entry, parse_entry, read_message, write_message, Message, MsgType,
    ResultPayload, TaskPayload,
};

pub use interchange::{ManagerRecord, Matcher};

const MAX_TASK_BATCH: usize = 1024;

#[derive(Debug, Clone)]
pub struct HtexConfig {
    pub label: String,
    pub workers_per_node: usize,
    /// Extra tasks a manager accepts beyond one per worker.
    pub prefetch_capacity: usize,
    pub heartbeat_period: Duration,
    pub heartbeat_threshold: Duration,
    pub batch_size_max: usize,
    pub init_blocks: usize,
    pub sandbox_root: PathBuf,
    /// Where the interchange records every task-to-manager assignment.
    pub dispatch_log: Option<PathBuf>,
    /// Keep the id of every result received, in arrival order.
    pub audit_results: bool,
    pub seed: u64,
    pub agent: AgentCommand,
}

impl HtexConfig {
    pub fn new(label: impl Into<String>, agent: AgentCommand) -> Self {
        HtexConfig {
            label: label.into(),
            workers_per_node: 1,
            prefetch_capacity: 0,
            heartbeat_period: Duration::from_secs(2),
            heartbeat_threshold: Duration::from_secs(6),
            batch_size_max: 128,
            init_blocks: 1,
            sandbox_root: std::env::temp_dir().join("pilotflow-sandbox"),
            dispatch_log: None,
            audit_results: false,
            seed: 0,
            agent,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameStats {
    pub task_batches: u64,
    pub tasks_sent: u64,
    pub result_batches: u64,
    pub results_received: u64,
    /// Results for attempts that were no longer in flight.
    pub stale_results: u64,
}

/// A manager as reported by the interchange.
#[derive(Debug, Clone, PartialEq)]
pub struct ManagerInfo {
    pub manager: String,
    pub block_id: String,
    pub workers: usize,
    pub capacity: usize,
    pub outstanding: usize,
    pub blacklisted: bool,
    /// How long the manager has had nothing outstanding.
    pub idle: Option<Duration>,
}

#[derive(Debug, Clone)]
struct Registered {
    block_id: String,
    workers: usize,
    pid: u32,
    alive: bool,
}

#[derive(Debug, Clone)]
struct BlockEntry {
    handle: Option<JobHandle>,
    state: BlockState,
    draining: bool,
}

#[derive(Default)]
struct Inflight {
    tasks: HashMap<TaskId, u32>,
    /// Set once the interchange connection is gone.
    dead: bool,
}

struct Shared {
    label: String,
    inflight: Mutex<Inflight>,
    managers: Mutex<BTreeMap<String, Registered>>,
    managers_changed: Condvar,
    blocks: Mutex<BTreeMap<String, BlockEntry>>,
    stats: Mutex<FrameStats>,
    audit: Option<Mutex<Vec<TaskId>>>,
    ctx: OnceLock<ExecutorContext>,
    status: Mutex<ExecutorStatus>,
}

impl Shared {
    fn deliver(&self, c: Completion) {
        if let Some(ctx) = self.ctx.get() {
            (ctx.sink)(c);
        }
    }

    fn manager_event(&self, event: &str, manager: &str, workers: usize) {
        if let Some(ctx) = self.ctx.get() {
            if ctx.monitor.enabled() {
                ctx.monitor.emit(ctx.monitor.now(
                    None,
                    EventKind::Manager {
                        event: event.into(),
                        manager: manager.into(),
                        workers,
                    },
                ));
            }
        }
    }

    fn block_event(&self, block: &str, state: &str) {
        if let Some(ctx) = self.ctx.get() {
            if ctx.monitor.enabled() {
                ctx.monitor.emit(ctx.monitor.now(
                    None,
                    EventKind::Block {
                        block: block.into(),
                        state: state.into(),
                    },
                ));
            }
        }
    }

    fn fail(&self, task_id: TaskId, attempt: u32, error: TaskError) {
        self.deliver(Completion {
            task_id,
            attempt,
            outcome: Err(error),
            started_us: None,
            finished_us: None,
            location: None,
        });
    }

    fn fail_all(&self, manager: &str) {
        let orphans: Vec<(TaskId, u32)> = {
            let mut inf = self.inflight.lock().unwrap();
            inf.dead = true;
            inf.tasks.drain().collect()
        };
        for (id, attempt) in orphans {
            self.fail(
                id,
                attempt,
                TaskError::ManagerLost {
                    manager: manager.to_string(),
                },
            );
        }
    }
}

struct Connection {
    tasks: Option<Sender<ExecTask>>,
    commands: Option<(TcpStream, BufReader<TcpStream>)>,
    interchange: Option<Child>,
    _announce: Option<BufReader<ChildStdout>>,
    task_port: u16,
    threads: Vec<JoinHandle<()>>,
}

/// Client side of the pilot-job executor.
pub struct HtexExecutor {
    config: HtexConfig,
    provider: Arc<dyn Provider>,
    shared: Arc<Shared>,
    conn: Mutex<Connection>,
    next_block: Mutex<usize>,
}

impl HtexExecutor {
    pub fn new(config: HtexConfig, provider: Arc<dyn Provider>) -> Self {
        let shared = Arc::new(Shared {
            label: config.label.clone(),
            inflight: Mutex::new(Inflight::default()),
            managers: Mutex::new(BTreeMap::new()),
            managers_changed: Condvar::new(),
            blocks: Mutex::new(BTreeMap::new()),
            stats: Mutex::new(FrameStats::default()),
            audit: config.audit_results.then(|| Mutex::new(Vec::new())),
            ctx: OnceLock::new(),
            status: Mutex::new(ExecutorStatus::Starting),
        });
        HtexExecutor {
            config,
            provider,
            shared,
            conn: Mutex::new(Connection {
                tasks: None,
                commands: None,
                interchange: None,
                _announce: None,
                task_port: 0,
                threads: Vec::new(),
            }),
            next_block: Mutex::new(0),
        }
    }

    pub fn config(&self) -> &HtexConfig {
        &self.config
    }

    pub fn provider(&self) -> &Arc<dyn Provider> {
        &self.provider
    }

    pub fn interchange_pid(&self) -> Option<u32> {
        self.conn
            .lock()
            .unwrap()
            .interchange
            .as_ref()
            .map(Child::id)
    }

    pub fn frame_stats(&self) -> FrameStats {
        *self.shared.stats.lock().unwrap()
    }

    /// Ids of received results in arrival order; empty unless
    /// `audit_results` is set.
    pub fn result_audit(&self) -> Vec<TaskId> {
        self.shared
            .audit
            .as_ref()
            .map(|a| a.lock().unwrap().clone())
            .unwrap_or_default()
    }

    /// Managers that registered and have not been lost, with their block.
    pub fn connected_managers(&self) -> Vec<(String, String)> {
        self.shared
            .managers
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, r)| r.alive)
            .map(|(m, r)| (m.clone(), r.block_id.clone()))
            .collect()
    }

    /// Process ids of connected managers, as they reported them.
    pub fn manager_pids(&self) -> BTreeMap<String, u32> {
        self.shared
            .managers
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, r)| r.alive)
            .map(|(m, r)| (m.clone(), r.pid))
            .collect()
    }

    /// Blocks until at least `n` managers are connected.
    pub fn wait_for_managers(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut managers = self.shared.managers.lock().unwrap();
        loop {
            if managers.values().filter(|r| r.alive).count() >= n {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            managers = self
                .shared
                .managers_changed
                .wait_timeout(managers, deadline - now)
                .unwrap()
                .0;
        }
    }

    pub fn block_states(&self) -> BTreeMap<String, BlockState> {
        self.shared
            .blocks
            .lock()
            .unwrap()
            .iter()
            .map(|(id, b)| (id.clone(), b.state))
            .collect()
    }

    fn command(&self, msg: Message) -> Result<Message, ExecutorError> {
        let mut conn = self.conn.lock().unwrap();
        let (w, r) = conn
            .commands
            .as_mut()
            .ok_or_else(|| ExecutorError::NotRunning(self.config.label.clone()))?;
        write_message(w, &msg).map_err(|e| ExecutorError::Protocol(e.to_string()))?;
        let reply = read_message(r).map_err(|e| ExecutorError::Protocol(e.to_string()))?;
        if let Some(err) = reply.str("error") {
            return Err(ExecutorError::Protocol(err.to_string()));
        }
        Ok(reply)
    }

    /// Tasks each manager holds.
    pub fn outstanding(&self) -> Result<BTreeMap<String, usize>, ExecutorError> {
        let reply = self.command(Message::new(MsgType::Cmd).with("cmd", "OUTSTANDING"))?;
        Ok(reply
            .get("outstanding")
            .and_then(Value::as_map)
            .map(|m| {
                m.iter()
                    .map(|(k, v)| (k.clone(), v.as_int().unwrap_or(0) as usize))
                    .collect()
            })
            .unwrap_or_default())
    }

    pub fn managers(&self) -> Result<Vec<ManagerInfo>, ExecutorError> {
        let reply = self.command(Message::new(MsgType::Cmd).with("cmd", "MANAGERS"))?;
        let list = reply
            .get("managers")
            .and_then(Value::as_list)
            .unwrap_or(&[]);
        Ok(list
            .iter()
            .filter_map(Value::as_map)
            .map(|m| {
                let s = |k: &str| m.get(k).and_then(Value::as_str).unwrap_or("").to_string();
                let i = |k: &str| m.get(k).and_then(Value::as_int).unwrap_or(0);
                let idle = i("idle_us");
                ManagerInfo {
                    manager: s("manager"),
                    block_id: s("block_id"),
                    workers: i("workers") as usize,
                    capacity: i("capacity") as usize,
                    outstanding: i("outstanding") as usize,
                    blacklisted: m
                        .get("blacklisted")
                        .and_then(Value::as_bool)
                        .unwrap_or(false),
                    idle: (idle >= 0).then(|| Duration::from_micros(idle as u64)),
                }
            })
            .collect())
    }

    /// Stops the interchange from sending `manager` new work; returns how
    /// many tasks it still holds.
    pub fn blacklist(&self, manager: &str) -> Result<usize, ExecutorError> {
        let reply = self
            .command(
                Message::new(MsgType::Cmd)
                    .with("cmd", "BLACKLIST")
                    .with("manager", manager),
            )
            .map_err(|e| match e {
                ExecutorError::Protocol(m) if m.starts_with("unknown manager") => {
                    ExecutorError::UnknownManager(manager.to_string())
                }
                other => other,
            })?;
        Ok(reply.int("outstanding").unwrap_or(0) as usize)
    }

    fn manager_launch(&self, task_port: u16) -> crate::provider::LaunchCommand {
        let c = &self.config;
        self.config
            .agent
            .command("htex-manager")
            .arg("--addr")
            .arg(format!("127.0.0.1:{task_port}"))
            .arg("--workers")
            .arg(c.workers_per_node.to_string())
            .arg("--prefetch")
            .arg(c.prefetch_capacity.to_string())
            .arg("--heartbeat-period-ms")
            .arg(c.heartbeat_period.as_millis().to_string())
            .arg("--heartbeat-threshold-ms")
            .arg(c.heartbeat_threshold.as_millis().to_string())
            .arg("--sandbox")
            .arg(c.sandbox_root.display().to_string())
    }

    fn spawn_interchange(
        &self,
    ) -> Result<(Child, BufReader<ChildStdout>, u16, u16), ExecutorError> {
        let c = &self.config;
        let mut cmd = Command::new(&c.agent.program);
        cmd.args(&c.agent.args)
            .arg("htex-interchange")
            .arg("--heartbeat-period-ms")
            .arg(c.heartbeat_period.as_millis().to_string())
            .arg("--heartbeat-threshold-ms")
            .arg(c.heartbeat_threshold.as_millis().to_string())
            .arg("--batch-size-max")
            .arg(c.batch_size_max.to_string())
            .arg("--seed")
            .arg(c.seed.to_string());
        if let Some(p) = &c.dispatch_log {
            cmd.arg("--dispatch-log").arg(p);
        }
        let mut child = cmd
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ExecutorError::Start(format!("cannot start interchange: {e}")))?;
        let mut out = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        out.read_line(&mut line)?;
        let ports: Vec<u16> = line
            .strip_prefix("PILOTFLOW_INTERCHANGE ")
            .map(|rest| {
                rest.split_whitespace()
                    .filter_map(|p| p.parse().ok())
                    .collect()
            })
            .unwrap_or_default();
        if ports.len() != 2 {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ExecutorError::Start(format!(
                "bad interchange announcement {line:?}"
            )));
        }
        Ok((child, out, ports[0], ports[1]))
    }
}

fn write_loop(stream: TcpStream, rx: Receiver<ExecTask>, shared: Arc<Shared>) {
    let mut w = BufWriter::new(stream);
    while let Ok(first) = rx.recv() {
        let mut batch = vec![first];
        while batch.len() < MAX_TASK_BATCH {
            match rx.try_recv() {
                Ok(t) => batch.push(t),
                Err(_) => break,
            }
        }
        let mut entries = Vec::with_capacity(batch.len());
        let mut sent = Vec::with_capacity(batch.len());
        for t in batch {
            let payload = TaskPayload {
                attempt: t.attempt,
                app: t.app,
                args: t.args,
                kwargs: t.kwargs,
            };
            match payload.encode() {
                Ok(bytes) => {
                    entries.push(entry(t.task_id, bytes));
                    sent.push((t.task_id, t.attempt));
                }
                Err(e) => {
                    shared.inflight.lock().unwrap().tasks.remove(&t.task_id);
                    shared.fail(
                        t.task_id,
                        t.attempt,
                        TaskError::Serialization(e.to_string()),
                    );
                }
            }
        }
        if entries.is_empty() {
            continue;
        }
        let n = entries.len() as u64;
        let msg = Message::new(MsgType::TaskBatch).with("tasks", Value::List(entries));
        if let Err(e) = write_message(&mut w, &msg).and_then(|_| w.flush().map_err(Into::into)) {
            tracing::error!(executor = %shared.label, "lost interchange while sending: {e}");
            shared.fail_all("interchange");
            return;
        }
        let mut stats = shared.stats.lock().unwrap();
        stats.task_batches += 1;
        stats.tasks_sent += n;
    }
}

fn read_loop(stream: TcpStream, shared: Arc<Shared>) {
    let mut r = BufReader::new(stream);
    loop {
        let msg = match read_message(&mut r) {
            Ok(m) => m,
            Err(e) => {
                let stopping = *shared.status.lock().unwrap() != ExecutorStatus::Running;
                if !stopping {
                    tracing::error!(executor = %shared.label, "interchange connection lost: {e}");
                }
                if stopping {
                    let mut inf = shared.inflight.lock().unwrap();
                    inf.dead = true;
                    inf.tasks.clear();
                } else {
                    shared.fail_all("interchange");
                }
                let lost: Vec<(String, usize)> = {
                    let mut managers = shared.managers.lock().unwrap();
                    managers
                        .iter_mut()
                        .filter(|(_, r)| r.alive)
                        .map(|(m, r)| {
                            r.alive = false;
                            (m.clone(), r.workers)
                        })
                        .collect()
                };
                for (m, w) in lost {
                    shared.manager_event(if stopping { "exited" } else { "lost" }, &m, w);
                }
                shared.managers_changed.notify_all();
                return;
            }
        };
        match msg.kind {
            MsgType::ResultBatch => on_results(&shared, &msg),
            MsgType::Register => {
                let manager = msg.str("manager").unwrap_or("").to_string();
                let workers = msg.int("workers").unwrap_or(1) as usize;
                let block_id = msg.str("block_id").unwrap_or("").to_string();
                tracing::info!(executor = %shared.label, %manager, %block_id, "manager connected");
                shared.manager_event("registered", &manager, workers);
                shared.managers.lock().unwrap().insert(
                    manager,
                    Registered {
                        block_id,
                        workers,
                        pid: msg.int("pid").unwrap_or(0) as u32,
                        alive: true,
                    },
                );
                shared.managers_changed.notify_all();
            }
            MsgType::ManagerLost => {
                let manager = msg.str("manager").unwrap_or("").to_string();
                let ids: Vec<TaskId> = msg
                    .get("tasks")
                    .and_then(Value::as_list)
                    .unwrap_or(&[])
                    .iter()
                    .filter_map(Value::as_int)
                    .map(|i| TaskId(i as u64))
                    .collect();
                tracing::warn!(executor = %shared.label, %manager, tasks = ids.len(), "manager lost");
                let workers = {
                    let mut managers = shared.managers.lock().unwrap();
                    managers.get_mut(&manager).map_or(0, |r| {
                        r.alive = false;
                        r.workers
                    })
                };
                shared.manager_event("lost", &manager, workers);
                shared.managers_changed.notify_all();
                for id in ids {
                    let attempt = shared.inflight.lock().unwrap().tasks.remove(&id);
                    if let Some(attempt) = attempt {
                        shared.fail(
                            id,
                            attempt,
                            TaskError::ManagerLost {
                                manager: manager.clone(),
                            },
                        );
                    }
                }
            }
            other => {
                tracing::warn!(executor = %shared.label, "unexpected {} frame", other.as_str())
            }
        }
    }
}

fn on_results(shared: &Shared, msg: &Message) {
    let Ok(entries) = batch_entries(msg) else {
        return;
    };
    let clock = shared.ctx.get().map(|c| *c.clock());
    let mut stale = 0;
    for e in entries {
        let Ok((id, payload)) = parse_entry(e) else {
            continue;
        };
        let result = crate::codec::decode(payload)
            .map_err(Into::into)
            .and_then(|v| ResultPayload::from_value(&v));
        let result = match result {
            Ok(r) => r,
            Err(err) => {
                tracing::error!("undecodable result for task {id}: {err}");
                let attempt = shared.inflight.lock().unwrap().tasks.remove(&id);
                if let Some(attempt) = attempt {
                    shared.fail(id, attempt, TaskError::Serialization(err.to_string()));
                }
                continue;
            }
        };
        if let Some(a) = &shared.audit {
            a.lock().unwrap().push(id);
        }
        let current = {
            let mut inf = shared.inflight.lock().unwrap();
            match inf.tasks.get(&id) {
                Some(&attempt) if attempt == result.attempt => inf.tasks.remove(&id).is_some(),
                _ => false,
            }
        };
        if !current {
            stale += 1;
            continue;
        }
        shared.deliver(Completion {
            task_id: id,
            attempt: result.attempt,
            outcome: result.outcome,
            started_us: clock.map(|c| c.from_epoch_us(result.start_us)),
            finished_us: clock.map(|c| c.from_epoch_us(result.end_us)),
            location: Some(result.worker),
        });
    }
    let mut stats = shared.stats.lock().unwrap();
    stats.result_batches += 1;
    stats.results_received += entries.len() as u64;
    stats.stale_results += stale;
}

impl Executor for HtexExecutor {
    fn label(&self) -> &str {
        &self.config.label
    }

    fn start(&self, ctx: ExecutorContext) -> Result<(), ExecutorError> {
        if self.shared.ctx.set(ctx).is_err() {
            return Err(ExecutorError::Start(format!(
                "{} already started",
                self.config.label
            )));
        }
        let (child, announce, task_port, cmd_port) = self.spawn_interchange()?;
        tracing::info!(executor = %self.config.label, pid = child.id(), task_port, cmd_port, "interchange up");

        let connect = |port: u16| -> Result<TcpStream, ExecutorError> {
            let s = TcpStream::connect(("127.0.0.1", port))?;
            s.set_nodelay(true)?;
            Ok(s)
        };
        let mut tasks = connect(task_port)?;
        write_message(
            &mut tasks,
            &Message::new(MsgType::Register).with("role", "client"),
        )
        .map_err(|e| ExecutorError::Start(e.to_string()))?;
        let cmd = connect(cmd_port)?;
        let cmd_reader = BufReader::new(cmd.try_clone()?);

        let (tx, rx) = unbounded();
        let mut threads = Vec::new();
        {
            let shared = self.shared.clone();
            let w = tasks.try_clone()?;
            threads.push(
                std::thread::Builder::new()
                    .name(format!("{}-send", self.config.label))
                    .spawn(move || write_loop(w, rx, shared))?,
            );
        }
        {
            let shared = self.shared.clone();
            threads.push(
                std::thread::Builder::new()
                    .name(format!("{}-recv", self.config.label))
                    .spawn(move || read_loop(tasks, shared))?,
            );
        }

        let observer_shared = Arc::downgrade(&self.shared);
        self.provider
            .set_observer(Arc::new(move |block: &str, state: BlockState| {
                let Some(shared) = observer_shared.upgrade() else {
                    return;
                };
                shared
                    .blocks
                    .lock()
                    .unwrap()
                    .entry(block.to_string())
                    .or_insert(BlockEntry {
                        handle: None,
                        state,
                        draining: false,
                    })
                    .state = state;
                shared.block_event(block, state.as_str());
            }));

        {
            let mut conn = self.conn.lock().unwrap();
            conn.tasks = Some(tx);
            conn.commands = Some((cmd, cmd_reader));
            conn.interchange = Some(child);
            conn._announce = Some(announce);
            conn.task_port = task_port;
            conn.threads = threads;
        }
        *self.shared.status.lock().unwrap() = ExecutorStatus::Running;
        if self.config.init_blocks > 0 {
            self.scale_out(self.config.init_blocks)?;
        }
        Ok(())
    }

    fn submit_task(&self, task: ExecTask) -> Result<(), ExecutorError> {
        let conn = self.conn.lock().unwrap();
        let tx = conn
            .tasks
            .as_ref()
            .ok_or_else(|| ExecutorError::NotRunning(self.config.label.clone()))?;
        {
            let mut inf = self.shared.inflight.lock().unwrap();
            if inf.dead {
                return Err(ExecutorError::NotRunning(self.config.label.clone()));
            }
            inf.tasks.insert(task.task_id, task.attempt);
        }
        let id = task.task_id;
        tx.send(task).map_err(|_| {
            self.shared.inflight.lock().unwrap().tasks.remove(&id);
            ExecutorError::NotRunning(self.config.label.clone())
        })
    }

    fn pending_count(&self) -> usize {
        self.shared.inflight.lock().unwrap().tasks.len()
    }

    fn status(&self) -> ExecutorStatus {
        let status = *self.shared.status.lock().unwrap();
        if status == ExecutorStatus::Running && self.shared.inflight.lock().unwrap().dead {
            return ExecutorStatus::Stopped;
        }
        status
    }

    fn scale_out(&self, blocks: usize) -> Result<Vec<String>, ExecutorError> {
        let task_port = {
            let conn = self.conn.lock().unwrap();
            if conn.tasks.is_none() {
                return Err(ExecutorError::NotRunning(self.config.label.clone()));
            }
            conn.task_port
        };
        let cmd = self.manager_launch(task_port);
        let mut ids = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let id = {
                let mut n = self.next_block.lock().unwrap();
                let id = format!("{}-{}", self.config.label, *n);
                *n += 1;
                id
            };
            self.shared
                .blocks
                .lock()
                .unwrap()
                .entry(id.clone())
                .or_insert(BlockEntry {
                    handle: None,
                    state: BlockState::Requested,
                    draining: false,
                });
            self.shared.block_event(&id, BlockState::Requested.as_str());
            match self.provider.submit(&id, &cmd) {
                Ok(handle) => {
                    if let Some(b) = self.shared.blocks.lock().unwrap().get_mut(&id) {
                        b.handle = Some(handle);
                    }
                    ids.push(id);
                }
                Err(e) => {
                    if let Some(b) = self.shared.blocks.lock().unwrap().get_mut(&id) {
                        b.state = BlockState::Failed;
                    }
                    return Err(ExecutorError::Provider(e.to_string()));
                }
            }
        }
        Ok(ids)
    }

    /// Blacklists the blocks' managers and cancels each block once it holds
    /// no outstanding tasks; busy blocks are cancelled by a later
    /// `load_snapshot`.
    fn scale_in(&self, block_ids: &[String]) -> Result<(), ExecutorError> {
        for id in block_ids {
            let handle = {
                let mut blocks = self.shared.blocks.lock().unwrap();
                let b = blocks
                    .get_mut(id)
                    .ok_or_else(|| ExecutorError::UnknownBlock(id.clone()))?;
                b.draining = true;
                b.handle.clone()
            };
            let managers: Vec<String> = self
                .connected_managers()
                .into_iter()
                .filter(|(_, b)| b == id)
                .map(|(m, _)| m)
                .collect();
            let mut outstanding = 0;
            for m in &managers {
                match self.blacklist(m) {
                    Ok(n) => outstanding += n,
                    Err(ExecutorError::UnknownManager(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            tracing::info!(executor = %self.config.label, block = %id, outstanding, "scaling in");
            if outstanding == 0 {
                if let Some(h) = handle {
                    self.provider
                        .cancel(&h)
                        .map_err(|e| ExecutorError::Provider(e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    fn load_snapshot(&self) -> Option<LoadSnapshot> {
        let infos = self.managers().ok()?;
        let mut by_block: BTreeMap<&str, Vec<&ManagerInfo>> = BTreeMap::new();
        for m in &infos {
            by_block.entry(m.block_id.as_str()).or_default().push(m);
        }
        let slots_per_block = self.provider.nodes_per_block()
            * (self.config.workers_per_node + self.config.prefetch_capacity);
        let mut snap = LoadSnapshot {
            outstanding_tasks: self.pending_count(),
            slots_per_block,
            ..LoadSnapshot::default()
        };
        let mut to_cancel = Vec::new();
        {
            let mut blocks = self.shared.blocks.lock().unwrap();
            for (id, b) in blocks.iter_mut() {
                if let Some(h) = &b.handle {
                    if let Ok(s) = self.provider.status(h) {
                        b.state = s;
                    }
                }
                if b.state.is_terminal() {
                    continue;
                }
                let managers = by_block.get(id.as_str());
                if b.draining {
                    let busy: usize =
                        managers.map_or(0, |ms| ms.iter().map(|m| m.outstanding).sum());
                    if busy == 0 && b.state != BlockState::Terminating {
                        to_cancel.extend(b.handle.clone());
                    }
                    continue;
                }
                if b.state.is_pending() {
                    snap.pending_blocks += 1;
                } else if b.state == BlockState::Active {
                    snap.active_blocks += 1;
                    if let Some(ms) = managers {
                        if ms.iter().all(|m| m.outstanding == 0) {
                            if let Some(idle) = ms.iter().filter_map(|m| m.idle).min() {
                                snap.idle_blocks.push((id.clone(), idle));
                            }
                        }
                    }
                }
            }
        }
        for h in to_cancel {
            let _ = self.provider.cancel(&h);
        }
        snap.active_slots = snap.active_blocks * slots_per_block;
        Some(snap)
    }

    fn shutdown(&self) -> Result<(), ExecutorError> {
        {
            let mut status = self.shared.status.lock().unwrap();
            if *status == ExecutorStatus::Stopped {
                return Ok(());
            }
            *status = ExecutorStatus::Draining;
        }
        let tx = self.conn.lock().unwrap().tasks.take();
        drop(tx);
        let _ = self.command(Message::new(MsgType::Cmd).with("cmd", "SHUTDOWN"));
        let handles: Vec<JobHandle> = self
            .shared
            .blocks
            .lock()
            .unwrap()
            .values()
            .filter_map(|b| b.handle.clone())
            .collect();
        for h in handles {
            let _ = self.provider.cancel(&h);
        }
        let (child, threads) = {
            let mut conn = self.conn.lock().unwrap();
            conn.commands = None;
            (conn.interchange.take(), std::mem::take(&mut conn.threads))
        };
        if let Some(mut child) = child {
            let deadline = Instant::now() + Duration::from_secs(2);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    break;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
        for t in threads {
            let _ = t.join();
        }
        self.shared.inflight.lock().unwrap().tasks.clear();
        *self.shared.status.lock().unwrap() = ExecutorStatus::Stopped;
        Ok(())
    }
}

impl Drop for HtexExecutor {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
