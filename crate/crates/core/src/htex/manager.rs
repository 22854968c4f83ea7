//! Per-node manager: registers with the interchange, feeds a local pool of
//! worker processes and batches their results back.

use std::io::{BufReader, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::agent::AgentCommand;
use crate::clock::epoch_us;
use crate::task::TaskError;
use crate::value::{TaskId, Value};
use crate::wire::{
    batch_entries, entry, parse_entry, read_message, write_message, Message, MsgType,
    ResultPayload, TaskPayload, WireError,
};

const MAX_RESULT_BATCH: usize = 1024;

#[derive(Debug, Clone)]
pub struct ManagerOptions {
    pub addr: String,
    pub workers: usize,
    pub prefetch: usize,
    pub heartbeat_period: Duration,
    pub heartbeat_threshold: Duration,
    pub sandbox: PathBuf,
    pub block_id: String,
    pub agent: AgentCommand,
}

type Shared = Arc<Mutex<TcpStream>>;

fn send(stream: &Shared, msg: &Message) -> Result<(), WireError> {
    let frame = msg.to_frame()?;
    let mut s = stream.lock().unwrap();
    s.write_all(&frame)?;
    Ok(())
}

/// Runs the manager until the interchange goes away or asks it to stop.
/// Worker processes are killed on the way out.
pub fn run(opts: ManagerOptions) -> Result<(), WireError> {
    let stream = TcpStream::connect(&opts.addr)?;
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    let shared: Shared = Arc::new(Mutex::new(stream));

    let uid = uuid::Uuid::new_v4().simple().to_string();
    let manager_id = if opts.block_id.is_empty() {
        format!("manager-{}", &uid[..8])
    } else {
        format!("{}-{}", opts.block_id, &uid[..8])
    };
    let workers = opts.workers.max(1);
    send(
        &shared,
        &Message::new(MsgType::Register)
            .with("role", "manager")
            .with("manager", manager_id.as_str())
            .with("block_id", opts.block_id.as_str())
            .with("workers", workers as i64)
            .with("capacity", (workers + opts.prefetch) as i64)
            .with("pid", std::process::id() as i64),
    )?;
    tracing::info!(manager = %manager_id, workers, "registered with interchange");

    let (task_tx, task_rx) = unbounded::<(TaskId, Vec<u8>)>();
    let (res_tx, res_rx) = unbounded::<Value>();
    let (exit_tx, exit_rx) = unbounded::<String>();
    let last_seen = Arc::new(Mutex::new(Instant::now()));
    let pids: Arc<Mutex<Vec<u32>>> = Arc::new(Mutex::new(Vec::new()));

    for i in 0..workers {
        let slot = WorkerSlot {
            name: format!("{manager_id}/{i}"),
            agent: opts.agent.clone(),
            sandbox: opts.sandbox.clone(),
            tasks: task_rx.clone(),
            results: res_tx.clone(),
            pids: pids.clone(),
        };
        std::thread::Builder::new()
            .name(format!("worker-slot-{i}"))
            .spawn(move || slot.run())?;
    }
    drop(res_tx);

    {
        let exit_tx = exit_tx.clone();
        let last_seen = last_seen.clone();
        std::thread::spawn(move || receive(reader, task_tx, last_seen, exit_tx));
    }
    {
        let shared = shared.clone();
        let exit_tx = exit_tx.clone();
        std::thread::spawn(move || aggregate(res_rx, shared, exit_tx));
    }
    {
        let shared = shared.clone();
        let (period, threshold) = (opts.heartbeat_period, opts.heartbeat_threshold);
        std::thread::spawn(move || loop {
            std::thread::sleep(period);
            if send(&shared, &Message::new(MsgType::Heartbeat)).is_err() {
                let _ = exit_tx.send("heartbeat write failed".into());
                return;
            }
            if last_seen.lock().unwrap().elapsed() > threshold {
                let _ = exit_tx.send("interchange heartbeat timeout".into());
                return;
            }
        });
    }

    let reason = exit_rx
        .recv()
        .unwrap_or_else(|_| "all threads ended".into());
    tracing::info!(manager = %manager_id, %reason, "manager exiting");
    for pid in pids.lock().unwrap().iter() {
        // SAFETY: signalling a pid has no memory-safety preconditions.
        unsafe {
            libc::kill(*pid as i32, libc::SIGKILL);
        }
    }
    Ok(())
}

fn receive(
    stream: TcpStream,
    tasks: Sender<(TaskId, Vec<u8>)>,
    last_seen: Arc<Mutex<Instant>>,
    exit: Sender<String>,
) {
    let mut r = BufReader::new(stream);
    loop {
        let msg = match read_message(&mut r) {
            Ok(m) => m,
            Err(e) => {
                let _ = exit.send(format!("interchange lost: {e}"));
                return;
            }
        };
        *last_seen.lock().unwrap() = Instant::now();
        match msg.kind {
            MsgType::TaskBatch => {
                let Ok(entries) = batch_entries(&msg) else {
                    continue;
                };
                for e in entries {
                    if let Ok((id, payload)) = parse_entry(e) {
                        let _ = tasks.send((id, payload.to_vec()));
                    }
                }
            }
            MsgType::Cmd if msg.str("cmd") == Some("SHUTDOWN") => {
                let _ = exit.send("shutdown requested".into());
                return;
            }
            _ => {}
        }
    }
}

fn aggregate(results: Receiver<Value>, stream: Shared, exit: Sender<String>) {
    while let Ok(first) = results.recv() {
        let mut batch = vec![first];
        while batch.len() < MAX_RESULT_BATCH {
            match results.try_recv() {
                Ok(e) => batch.push(e),
                Err(_) => break,
            }
        }
        let msg = Message::new(MsgType::ResultBatch).with("results", Value::List(batch));
        if let Err(e) = send(&stream, &msg) {
            let _ = exit.send(format!("result write failed: {e}"));
            return;
        }
    }
}

struct WorkerSlot {
    name: String,
    agent: AgentCommand,
    sandbox: PathBuf,
    tasks: Receiver<(TaskId, Vec<u8>)>,
    results: Sender<Value>,
    pids: Arc<Mutex<Vec<u32>>>,
}

impl WorkerSlot {
    fn spawn(&self) -> std::io::Result<Child> {
        let child = Command::new(&self.agent.program)
            .args(&self.agent.args)
            .arg("htex-worker")
            .arg("--sandbox")
            .arg(&self.sandbox)
            .arg("--worker-id")
            .arg(&self.name)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        self.pids.lock().unwrap().push(child.id());
        Ok(child)
    }

    fn lost(&self, id: TaskId, payload: &[u8], why: &str) -> Value {
        let attempt = crate::codec::decode(payload)
            .ok()
            .and_then(|v| TaskPayload::from_value(&v).ok())
            .map_or(0, |t| t.attempt);
        let now = epoch_us();
        let result = ResultPayload {
            attempt,
            outcome: Err(TaskError::WorkerLost(format!("{}: {why}", self.name))),
            start_us: now,
            end_us: now,
            worker: self.name.clone(),
        };
        entry(id, result.encode())
    }

    /// Feeds tasks to one worker process, replacing it if it dies.
    fn run(self) {
        loop {
            let mut child = match self.spawn() {
                Ok(c) => c,
                Err(e) => {
                    tracing::error!(worker = %self.name, "cannot start worker: {e}");
                    // Fail whatever arrives rather than stalling it.
                    for (id, payload) in self.tasks.iter() {
                        let _ =
                            self.results
                                .send(self.lost(id, &payload, "worker could not start"));
                    }
                    return;
                }
            };
            let mut stdin = child.stdin.take().expect("piped stdin");
            let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
            loop {
                let Ok((id, payload)) = self.tasks.recv() else {
                    let _ = child.kill();
                    let _ = child.wait();
                    return;
                };
                let msg = Message::new(MsgType::TaskBatch)
                    .with("tasks", Value::List(vec![entry(id, payload.clone())]));
                let reply = write_message(&mut stdin, &msg)
                    .and_then(|_| stdin.flush().map_err(WireError::from))
                    .and_then(|_| read_message(&mut stdout));
                match reply.as_ref().map(batch_entries) {
                    Ok(Ok(entries)) => {
                        for e in entries {
                            let _ = self.results.send(e.clone());
                        }
                    }
                    _ => {
                        let status = child.try_wait().ok().flatten();
                        tracing::warn!(worker = %self.name, ?status, "worker died, restarting");
                        let _ = self.results.send(self.lost(id, &payload, "process exited"));
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
    }
}
