//! Low-latency executor.
//!
//! Tasks go one frame at a time through a stateless relay process to
//! single-task workers. The relay forgets a task as soon as it has passed
//! it on, so reliability lives in the client: each task can be sent to
//! several workers at once, and unanswered tasks are resent after a
//! timeout.

pub mod relay;
pub mod worker;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::path::PathBuf;
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Sender};

use crate::agent::AgentCommand;
use crate::executor::{
    Completion, ExecTask, Executor, ExecutorContext, ExecutorError, ExecutorStatus,
};
use crate::monitor::EventKind;
use crate::task::TaskError;
use crate::value::{TaskId, Value};
use crate::wire::{
    batch_entries, entry, parse_entry, read_message, write_message, Message, MsgType,
    ResultPayload, TaskPayload, WireError,
};

#[derive(Debug, Clone)]
pub struct LlexConfig {
    pub label: String,
    pub workers: usize,
    /// Extra workers that swallow every task and only report themselves
    /// free again.
    pub drop_workers: usize,
    /// Copies of each task sent to distinct workers; the first answer wins.
    pub replication_factor: usize,
    /// Resend a task that has not been answered within this time.
    pub timeout: Option<Duration>,
    /// Resends before the task fails with a timeout.
    pub retries: u32,
    pub sandbox_root: PathBuf,
    pub agent: AgentCommand,
}

impl LlexConfig {
    pub fn new(label: impl Into<String>, agent: AgentCommand) -> Self {
        LlexConfig {
            label: label.into(),
            workers: 1,
            drop_workers: 0,
            replication_factor: 1,
            timeout: None,
            retries: 0,
            sandbox_root: std::env::temp_dir().join("pilotflow-sandbox"),
            agent,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LlexStats {
    pub frames_sent: u64,
    pub results: u64,
    /// Answers for attempts no longer waiting: losing replicas and late
    /// answers to resent tasks.
    pub duplicates: u64,
    pub resends: u64,
    pub timeouts: u64,
    /// Hop count observed by workers on task frames.
    pub task_hops: BTreeMap<i64, u64>,
    /// Hops of a full round trip, counted on arrival here.
    pub round_trip_hops: BTreeMap<i64, u64>,
}

/// What the relay reports about itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayInfo {
    pub buffered: usize,
    pub tracked_tasks: usize,
    pub idle_workers: usize,
    pub busy_workers: usize,
    pub workers: usize,
}

struct Pending {
    attempt: u32,
    payload: Vec<u8>,
    deadline: Option<Instant>,
    sends: u32,
}

struct Shared {
    label: String,
    replication: usize,
    timeout: Option<Duration>,
    retries: u32,
    writer: Mutex<Option<BufWriter<TcpStream>>>,
    inflight: Mutex<HashMap<TaskId, Pending>>,
    stats: Mutex<LlexStats>,
    replies: Mutex<Option<Sender<Message>>>,
    ctx: OnceLock<ExecutorContext>,
    tags: AtomicU64,
    stopping: AtomicBool,
}

impl Shared {
    fn deliver(&self, c: Completion) {
        if let Some(ctx) = self.ctx.get() {
            (ctx.sink)(c);
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

    fn write(&self, msg: &Message) -> Result<(), WireError> {
        let mut guard = self.writer.lock().unwrap();
        let w = guard.as_mut().ok_or(WireError::Eof)?;
        write_message(w, msg)?;
        w.flush()?;
        Ok(())
    }

    /// One frame; the relay hands it to `replication` distinct workers.
    fn send_copies(&self, id: TaskId, payload: &[u8]) -> Result<(), WireError> {
        let tag = self.tags.fetch_add(1, Ordering::Relaxed) as i64;
        let msg = Message::new(MsgType::TaskBatch)
            .with("tasks", Value::List(vec![entry(id, payload.to_vec())]))
            .with("tag", tag)
            .with("replicas", self.replication as i64)
            .with("hops", 0i64);
        self.write(&msg)?;
        self.stats.lock().unwrap().frames_sent += 1;
        Ok(())
    }

    fn on_results(&self, msg: &Message) {
        let Ok(entries) = batch_entries(msg) else {
            return;
        };
        if entries.is_empty() {
            return;
        }
        {
            let mut stats = self.stats.lock().unwrap();
            if let Some(h) = msg.int("task_hops") {
                *stats.task_hops.entry(h).or_default() += 1;
            }
            let trip = msg.int("hops").unwrap_or(0) + 1;
            *stats.round_trip_hops.entry(trip).or_default() += 1;
        }
        let clock = self.ctx.get().map(|c| *c.clock());
        for e in entries {
            let Ok((id, payload)) = parse_entry(e) else {
                continue;
            };
            let Ok(result) = crate::codec::decode(payload)
                .map_err(WireError::from)
                .and_then(|v| ResultPayload::from_value(&v))
            else {
                tracing::error!(executor = %self.label, "undecodable result for task {id}");
                continue;
            };
            let won = {
                let mut inflight = self.inflight.lock().unwrap();
                match inflight.get(&id) {
                    Some(p) if p.attempt == result.attempt => inflight.remove(&id).is_some(),
                    _ => false,
                }
            };
            let mut stats = self.stats.lock().unwrap();
            stats.results += 1;
            if !won {
                stats.duplicates += 1;
                continue;
            }
            drop(stats);
            self.deliver(Completion {
                task_id: id,
                attempt: result.attempt,
                outcome: result.outcome,
                started_us: clock.map(|c| c.from_epoch_us(result.start_us)),
                finished_us: clock.map(|c| c.from_epoch_us(result.end_us)),
                location: Some(result.worker),
            });
        }
    }

    /// Resends or fails tasks whose deadline has passed.
    fn expire(&self, now: Instant) {
        let Some(timeout) = self.timeout else { return };
        let mut resend = Vec::new();
        let mut failed = Vec::new();
        {
            let mut inflight = self.inflight.lock().unwrap();
            inflight.retain(|id, p| {
                if p.deadline.is_none_or(|d| d > now) {
                    return true;
                }
                if p.sends <= self.retries {
                    p.sends += 1;
                    p.deadline = Some(now + timeout);
                    resend.push((*id, p.payload.clone()));
                    true
                } else {
                    failed.push((*id, p.attempt, p.sends));
                    false
                }
            });
        }
        for (id, payload) in resend {
            tracing::debug!(executor = %self.label, task = %id, "resending unanswered task");
            self.stats.lock().unwrap().resends += 1;
            let _ = self.send_copies(id, &payload);
        }
        for (id, attempt, sends) in failed {
            self.stats.lock().unwrap().timeouts += 1;
            self.fail(id, attempt, TaskError::LlexTimeout { attempts: sends });
        }
    }
}

struct Processes {
    relay: Option<Child>,
    workers: Vec<Child>,
    _announce: Option<BufReader<ChildStdout>>,
    threads: Vec<JoinHandle<()>>,
}

pub struct LlexExecutor {
    config: LlexConfig,
    shared: Arc<Shared>,
    procs: Mutex<Processes>,
    status: Mutex<ExecutorStatus>,
    cmd_lock: Mutex<()>,
}

impl LlexExecutor {
    pub fn new(config: LlexConfig) -> Self {
        let shared = Arc::new(Shared {
            label: config.label.clone(),
            replication: config.replication_factor.max(1),
            timeout: config.timeout,
            retries: config.retries,
            writer: Mutex::new(None),
            inflight: Mutex::new(HashMap::new()),
            stats: Mutex::new(LlexStats::default()),
            replies: Mutex::new(None),
            ctx: OnceLock::new(),
            tags: AtomicU64::new(0),
            stopping: AtomicBool::new(false),
        });
        LlexExecutor {
            config,
            shared,
            procs: Mutex::new(Processes {
                relay: None,
                workers: Vec::new(),
                _announce: None,
                threads: Vec::new(),
            }),
            status: Mutex::new(ExecutorStatus::Starting),
            cmd_lock: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &LlexConfig {
        &self.config
    }

    pub fn stats(&self) -> LlexStats {
        self.shared.stats.lock().unwrap().clone()
    }

    pub fn relay_pid(&self) -> Option<u32> {
        self.procs.lock().unwrap().relay.as_ref().map(Child::id)
    }

    /// Pids of the worker processes, answering workers first.
    pub fn worker_pids(&self) -> Vec<u32> {
        self.procs
            .lock()
            .unwrap()
            .workers
            .iter()
            .map(Child::id)
            .collect()
    }

    /// Asks the relay what it is holding.
    pub fn relay_info(&self) -> Result<RelayInfo, ExecutorError> {
        let _one_at_a_time = self.cmd_lock.lock().unwrap();
        let (tx, rx) = bounded(1);
        *self.shared.replies.lock().unwrap() = Some(tx);
        self.shared
            .write(&Message::new(MsgType::Cmd).with("cmd", "STATE"))
            .map_err(|e| ExecutorError::Protocol(e.to_string()))?;
        let reply = rx
            .recv_timeout(Duration::from_secs(5))
            .map_err(|_| ExecutorError::Protocol("relay did not answer".into()))?;
        let n = |k: &str| reply.int(k).unwrap_or(0) as usize;
        Ok(RelayInfo {
            buffered: n("buffered"),
            tracked_tasks: n("tracked_tasks"),
            idle_workers: n("idle_workers"),
            busy_workers: n("busy_workers"),
            workers: n("workers"),
        })
    }

    fn spawn_relay(&self) -> Result<(Child, BufReader<ChildStdout>, u16, u16), ExecutorError> {
        let mut child = Command::new(&self.config.agent.program)
            .args(&self.config.agent.args)
            .arg("llex-relay")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ExecutorError::Start(format!("cannot start relay: {e}")))?;
        let mut out = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        out.read_line(&mut line)?;
        let ports: Vec<u16> = line
            .strip_prefix("PILOTFLOW_RELAY ")
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
                "bad relay announcement {line:?}"
            )));
        }
        Ok((child, out, ports[0], ports[1]))
    }

    fn spawn_worker(
        &self,
        worker_port: u16,
        index: usize,
        drop_tasks: bool,
    ) -> Result<Child, ExecutorError> {
        let mut cmd = Command::new(&self.config.agent.program);
        cmd.args(&self.config.agent.args)
            .arg("llex-worker")
            .arg("--addr")
            .arg(format!("127.0.0.1:{worker_port}"))
            .arg("--worker-id")
            .arg(format!("{}/{index}", self.config.label))
            .arg("--sandbox")
            .arg(&self.config.sandbox_root);
        if drop_tasks {
            cmd.arg("--drop");
        }
        cmd.stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ExecutorError::Start(format!("cannot start worker: {e}")))
    }

    fn manager_events(&self, event: &str) {
        let Some(ctx) = self.shared.ctx.get() else {
            return;
        };
        if !ctx.monitor.enabled() {
            return;
        }
        for i in 0..self.config.workers + self.config.drop_workers {
            ctx.monitor.emit(ctx.monitor.now(
                None,
                EventKind::Manager {
                    event: event.into(),
                    manager: format!("{}/{i}", self.config.label),
                    workers: 1,
                },
            ));
        }
    }
}

impl Executor for LlexExecutor {
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
        let (relay, announce, client_port, worker_port) = self.spawn_relay()?;
        let stream = TcpStream::connect(("127.0.0.1", client_port))?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        *self.shared.writer.lock().unwrap() = Some(BufWriter::new(stream));

        let mut threads = Vec::new();
        {
            let shared = self.shared.clone();
            threads.push(
                std::thread::Builder::new()
                    .name(format!("{}-recv", self.config.label))
                    .spawn(move || read_loop(reader, shared))?,
            );
        }
        if let Some(timeout) = self.config.timeout {
            let shared = self.shared.clone();
            let tick = (timeout / 10).clamp(Duration::from_millis(1), Duration::from_millis(50));
            threads.push(
                std::thread::Builder::new()
                    .name(format!("{}-timer", self.config.label))
                    .spawn(move || {
                        while !shared.stopping.load(Ordering::SeqCst) {
                            std::thread::sleep(tick);
                            shared.expire(Instant::now());
                        }
                    })?,
            );
        }

        let mut workers = Vec::new();
        for i in 0..self.config.workers {
            workers.push(self.spawn_worker(worker_port, i, false)?);
        }
        for i in 0..self.config.drop_workers {
            workers.push(self.spawn_worker(worker_port, self.config.workers + i, true)?);
        }
        {
            let mut procs = self.procs.lock().unwrap();
            procs.relay = Some(relay);
            procs.workers = workers;
            procs._announce = Some(announce);
            procs.threads = threads;
        }

        let total = self.config.workers + self.config.drop_workers;
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let info = self.relay_info()?;
            if info.idle_workers >= total {
                break;
            }
            if Instant::now() >= deadline {
                return Err(ExecutorError::Start(format!(
                    "only {} of {total} workers reached the relay",
                    info.idle_workers
                )));
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        self.manager_events("registered");
        *self.status.lock().unwrap() = ExecutorStatus::Running;
        Ok(())
    }

    fn submit_task(&self, task: ExecTask) -> Result<(), ExecutorError> {
        if *self.status.lock().unwrap() != ExecutorStatus::Running {
            return Err(ExecutorError::NotRunning(self.config.label.clone()));
        }
        let payload = TaskPayload {
            attempt: task.attempt,
            app: task.app,
            args: task.args,
            kwargs: task.kwargs,
        };
        let bytes = match payload.encode() {
            Ok(b) => b,
            Err(e) => {
                self.shared.fail(
                    task.task_id,
                    task.attempt,
                    TaskError::Serialization(e.to_string()),
                );
                return Ok(());
            }
        };
        self.shared.inflight.lock().unwrap().insert(
            task.task_id,
            Pending {
                attempt: task.attempt,
                payload: bytes.clone(),
                deadline: self.config.timeout.map(|t| Instant::now() + t),
                sends: 1,
            },
        );
        if let Err(e) = self.shared.send_copies(task.task_id, &bytes) {
            self.shared.inflight.lock().unwrap().remove(&task.task_id);
            return Err(ExecutorError::Protocol(e.to_string()));
        }
        Ok(())
    }

    fn pending_count(&self) -> usize {
        self.shared.inflight.lock().unwrap().len()
    }

    fn status(&self) -> ExecutorStatus {
        *self.status.lock().unwrap()
    }

    fn shutdown(&self) -> Result<(), ExecutorError> {
        {
            let mut status = self.status.lock().unwrap();
            if *status == ExecutorStatus::Stopped {
                return Ok(());
            }
            *status = ExecutorStatus::Draining;
        }
        self.shared.stopping.store(true, Ordering::SeqCst);
        if let Some(w) = self.shared.writer.lock().unwrap().take() {
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
        let (relay, workers, threads) = {
            let mut p = self.procs.lock().unwrap();
            (
                p.relay.take(),
                std::mem::take(&mut p.workers),
                std::mem::take(&mut p.threads),
            )
        };
        let deadline = Instant::now() + Duration::from_secs(2);
        for mut child in relay.into_iter().chain(workers) {
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
        for t in threads {
            let _ = t.join();
        }
        self.manager_events("exited");
        self.shared.inflight.lock().unwrap().clear();
        *self.status.lock().unwrap() = ExecutorStatus::Stopped;
        Ok(())
    }
}

fn read_loop(stream: TcpStream, shared: Arc<Shared>) {
    let mut r = BufReader::new(stream);
    loop {
        match read_message(&mut r) {
            Ok(msg) => match msg.kind {
                MsgType::ResultBatch => shared.on_results(&msg),
                MsgType::CmdReply => {
                    if let Some(tx) = shared.replies.lock().unwrap().take() {
                        let _ = tx.send(msg);
                    }
                }
                _ => {}
            },
            Err(e) => {
                if !shared.stopping.load(Ordering::SeqCst) {
                    tracing::error!(executor = %shared.label, "relay connection lost: {e}");
                    let orphans: Vec<(TaskId, u32)> = shared
                        .inflight
                        .lock()
                        .unwrap()
                        .drain()
                        .map(|(id, p)| (id, p.attempt))
                        .collect();
                    for (id, attempt) in orphans {
                        shared.fail(
                            id,
                            attempt,
                            TaskError::WorkerLost("relay connection lost".into()),
                        );
                    }
                }
                return;
            }
        }
    }
}

impl Drop for LlexExecutor {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
