//! The interchange: broker between one executor client and many managers.
//!
//! One routing loop owns all state. Reader threads turn socket input into
//! events, writer threads drain per-connection frame queues, and the
//! command port is served synchronously through the same loop.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clock::epoch_us;
use crate::value::{TaskId, Value};
use crate::wire::{
    self, batch_entries, entry, parse_entry, read_message, Message, MsgType, WireError,
};

/// Interchange-side view of one manager.
#[derive(Debug, Clone)]
pub struct ManagerRecord {
    pub manager_id: String,
    pub block_id: String,
    pub workers: usize,
    pub advertised_capacity: usize,
    pub outstanding: BTreeSet<TaskId>,
    pub last_heartbeat: Instant,
    pub blacklisted: bool,
    /// When the manager last became idle (registration counts).
    pub idle_since: Option<Instant>,
}

impl ManagerRecord {
    pub fn new(
        manager_id: &str,
        block_id: &str,
        workers: usize,
        capacity: usize,
        now: Instant,
    ) -> Self {
        ManagerRecord {
            manager_id: manager_id.to_string(),
            block_id: block_id.to_string(),
            workers,
            advertised_capacity: capacity,
            outstanding: BTreeSet::new(),
            last_heartbeat: now,
            blacklisted: false,
            idle_since: Some(now),
        }
    }

    pub fn spare(&self) -> usize {
        self.advertised_capacity
            .saturating_sub(self.outstanding.len())
    }

    pub fn is_live(&self, now: Instant, threshold: Duration) -> bool {
        now.saturating_duration_since(self.last_heartbeat) <= threshold
    }
}

/// Assigns queued tasks to managers with spare capacity.
pub struct Matcher {
    rng: ChaCha8Rng,
    batch_size_max: usize,
    heartbeat_threshold: Duration,
}

impl Matcher {
    pub fn new(seed: u64, batch_size_max: usize, heartbeat_threshold: Duration) -> Self {
        Matcher {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_size_max: batch_size_max.max(1),
            heartbeat_threshold,
        }
    }

    /// Drains `queue` into batches for eligible managers, visiting them in
    /// uniformly random order. Each batch holds at most
    /// `min(spare capacity, batch_size_max)` tasks; tasks with no eligible
    /// manager stay queued. Outstanding sets are updated in place.
    pub fn match_tasks<T>(
        &mut self,
        queue: &mut VecDeque<(TaskId, T)>,
        managers: &mut BTreeMap<String, ManagerRecord>,
        now: Instant,
    ) -> Vec<(String, Vec<(TaskId, T)>)> {
        let mut out = Vec::new();
        while !queue.is_empty() {
            let mut eligible: Vec<String> = managers
                .values()
                .filter(|m| {
                    !m.blacklisted && m.spare() > 0 && m.is_live(now, self.heartbeat_threshold)
                })
                .map(|m| m.manager_id.clone())
                .collect();
            if eligible.is_empty() {
                break;
            }
            eligible.shuffle(&mut self.rng);
            for id in eligible {
                if queue.is_empty() {
                    break;
                }
                let m = managers.get_mut(&id).expect("eligible manager exists");
                let n = m.spare().min(self.batch_size_max).min(queue.len());
                let batch: Vec<(TaskId, T)> = queue.drain(..n).collect();
                m.outstanding.extend(batch.iter().map(|(t, _)| *t));
                m.idle_since = None;
                out.push((id, batch));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct InterchangeOptions {
    pub bind: String,
    pub heartbeat_period: Duration,
    pub heartbeat_threshold: Duration,
    pub batch_size_max: usize,
    pub seed: u64,
    pub dispatch_log: Option<PathBuf>,
}

type ConnId = u64;

enum Ev {
    Client(ConnId, Sender<Vec<u8>>),
    Manager(ConnId, Message, Sender<Vec<u8>>),
    Frame(ConnId, Message),
    Closed(ConnId),
    Cmd(Message, Sender<Message>),
}

fn spawn_writer(stream: TcpStream) -> Sender<Vec<u8>> {
    let (tx, rx) = unbounded::<Vec<u8>>();
    std::thread::spawn(move || {
        let mut w = BufWriter::new(stream);
        while let Ok(frame) = rx.recv() {
            if w.write_all(&frame).is_err() {
                return;
            }
            while let Ok(more) = rx.try_recv() {
                if w.write_all(&more).is_err() {
                    return;
                }
            }
            if w.flush().is_err() {
                return;
            }
        }
    });
    tx
}

fn serve_task_port(listener: TcpListener, events: Sender<Ev>) {
    for (next, stream) in listener.incoming().enumerate() {
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let conn = next as ConnId;
        let events = events.clone();
        std::thread::spawn(move || {
            let Ok(write_half) = stream.try_clone() else {
                return;
            };
            let mut reader = BufReader::new(stream);
            let hello = match read_message(&mut reader) {
                Ok(m) if m.kind == MsgType::Register => m,
                _ => return,
            };
            let writer = spawn_writer(write_half);
            let ev = if hello.str("role") == Some("client") {
                Ev::Client(conn, writer)
            } else {
                Ev::Manager(conn, hello, writer)
            };
            if events.send(ev).is_err() {
                return;
            }
            loop {
                match read_message(&mut reader) {
                    Ok(m) => {
                        if events.send(Ev::Frame(conn, m)).is_err() {
                            return;
                        }
                    }
                    Err(_) => {
                        let _ = events.send(Ev::Closed(conn));
                        return;
                    }
                }
            }
        });
    }
}

fn serve_command_port(listener: TcpListener, events: Sender<Ev>) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let events = events.clone();
        std::thread::spawn(move || {
            let Ok(mut write_half) = stream.try_clone() else {
                return;
            };
            let mut reader = BufReader::new(stream);
            while let Ok(msg) = read_message(&mut reader) {
                let (tx, rx) = unbounded();
                if events.send(Ev::Cmd(msg, tx)).is_err() {
                    return;
                }
                let Ok(reply) = rx.recv() else { return };
                if wire::write_message(&mut write_half, &reply).is_err() {
                    return;
                }
            }
        });
    }
}

struct Conn {
    manager: Option<String>,
    writer: Sender<Vec<u8>>,
}

struct Interchange {
    opts: InterchangeOptions,
    matcher: Matcher,
    queue: VecDeque<(TaskId, Vec<u8>)>,
    managers: BTreeMap<String, ManagerRecord>,
    conns: HashMap<ConnId, Conn>,
    client: Option<(ConnId, Sender<Vec<u8>>)>,
    /// Frames for the client that arrived before it connected.
    early: Vec<Message>,
    dispatch_log: Option<BufWriter<File>>,
    batch_seq: u64,
}

/// Binds both ports, announces them on stdout and routes until the client
/// disconnects or a SHUTDOWN command arrives.
pub fn run(opts: InterchangeOptions) -> Result<(), WireError> {
    let tasks = TcpListener::bind(format!("{}:0", opts.bind))?;
    let cmds = TcpListener::bind(format!("{}:0", opts.bind))?;
    println!(
        "PILOTFLOW_INTERCHANGE {} {}",
        tasks.local_addr()?.port(),
        cmds.local_addr()?.port()
    );
    std::io::stdout().flush()?;

    let (tx, rx) = unbounded();
    let t2 = tx.clone();
    std::thread::spawn(move || serve_task_port(tasks, t2));
    std::thread::spawn(move || serve_command_port(cmds, tx));

    let dispatch_log = match &opts.dispatch_log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut ix = Interchange {
        matcher: Matcher::new(opts.seed, opts.batch_size_max, opts.heartbeat_threshold),
        opts,
        queue: VecDeque::new(),
        managers: BTreeMap::new(),
        conns: HashMap::new(),
        client: None,
        early: Vec::new(),
        dispatch_log,
        batch_seq: 0,
    };
    ix.route(rx);
    Ok(())
}

impl Interchange {
    fn route(&mut self, rx: Receiver<Ev>) {
        let tick = (self.opts.heartbeat_period / 4)
            .clamp(Duration::from_millis(5), Duration::from_millis(100));
        let mut last_beat = Instant::now();
        loop {
            match rx.recv_timeout(tick) {
                Ok(ev) => {
                    if !self.handle(ev) {
                        break;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            let now = Instant::now();
            if now.duration_since(last_beat) >= self.opts.heartbeat_period {
                last_beat = now;
                self.send_heartbeats();
            }
            self.expire_managers(now);
        }
        self.flush_log();
        // Give writer threads a moment to deliver the last frames.
        std::thread::sleep(Duration::from_millis(50));
    }

    fn send(&self, writer: &Sender<Vec<u8>>, msg: &Message) {
        match msg.to_frame() {
            Ok(f) => {
                let _ = writer.send(f);
            }
            Err(e) => tracing::error!("cannot encode {}: {e}", msg.kind.as_str()),
        }
    }

    fn tell_client(&mut self, msg: &Message) {
        match &self.client {
            Some((_, w)) => self.send(w, msg),
            None => self.early.push(msg.clone()),
        }
    }

    fn handle(&mut self, ev: Ev) -> bool {
        match ev {
            Ev::Client(conn, writer) => {
                tracing::debug!("client connected");
                self.conns.insert(
                    conn,
                    Conn {
                        manager: None,
                        writer: writer.clone(),
                    },
                );
                for msg in std::mem::take(&mut self.early) {
                    self.send(&writer, &msg);
                }
                self.client = Some((conn, writer));
            }
            Ev::Manager(conn, hello, writer) => self.register(conn, hello, writer),
            Ev::Frame(conn, msg) => self.frame(conn, msg),
            Ev::Closed(conn) => {
                let Some(c) = self.conns.remove(&conn) else {
                    return true;
                };
                if self.client.as_ref().is_some_and(|(id, _)| *id == conn) {
                    tracing::info!("client disconnected, interchange exiting");
                    return false;
                }
                if let Some(m) = c.manager {
                    self.lose(&m, "disconnected");
                }
            }
            Ev::Cmd(msg, reply) => return self.command(msg, reply),
        }
        true
    }

    fn register(&mut self, conn: ConnId, hello: Message, writer: Sender<Vec<u8>>) {
        let Some(manager) = hello.str("manager").map(str::to_string) else {
            return;
        };
        let workers = hello.int("workers").unwrap_or(1).max(1) as usize;
        let capacity = hello.int("capacity").unwrap_or(workers as i64).max(1) as usize;
        let block = hello.str("block_id").unwrap_or("").to_string();
        tracing::info!(%manager, %block, workers, capacity, "manager registered");
        self.managers.insert(
            manager.clone(),
            ManagerRecord::new(&manager, &block, workers, capacity, Instant::now()),
        );
        self.conns.insert(
            conn,
            Conn {
                manager: Some(manager),
                writer,
            },
        );
        self.tell_client(&hello);
        self.dispatch();
    }

    fn frame(&mut self, conn: ConnId, msg: Message) {
        let manager = self.conns.get(&conn).and_then(|c| c.manager.clone());
        match (msg.kind, manager) {
            (MsgType::TaskBatch, None) => {
                let Ok(entries) = batch_entries(&msg) else {
                    return;
                };
                for e in entries {
                    if let Ok((id, payload)) = parse_entry(e) {
                        self.queue.push_back((id, payload.to_vec()));
                    }
                }
                self.dispatch();
            }
            (MsgType::ResultBatch, Some(m)) => {
                if let Some(rec) = self.managers.get_mut(&m) {
                    rec.last_heartbeat = Instant::now();
                    if let Ok(entries) = batch_entries(&msg) {
                        for e in entries {
                            if let Ok((id, _)) = parse_entry(e) {
                                rec.outstanding.remove(&id);
                            }
                        }
                    }
                    if rec.outstanding.is_empty() && rec.idle_since.is_none() {
                        rec.idle_since = Some(Instant::now());
                    }
                }
                self.tell_client(&msg.with("manager", m.as_str()));
                self.dispatch();
            }
            (MsgType::Heartbeat, Some(m)) => {
                if let Some(rec) = self.managers.get_mut(&m) {
                    rec.last_heartbeat = Instant::now();
                }
            }
            (kind, _) => tracing::warn!("unexpected {} frame", kind.as_str()),
        }
    }

    fn dispatch(&mut self) {
        if self.queue.is_empty() {
            return;
        }
        let batches = self
            .matcher
            .match_tasks(&mut self.queue, &mut self.managers, Instant::now());
        for (manager, batch) in batches {
            self.batch_seq += 1;
            if let Some(log) = &mut self.dispatch_log {
                let ts = epoch_us();
                for (id, _) in &batch {
                    let _ = writeln!(log, "{ts}\t{manager}\t{}\t{}", id.0, self.batch_seq);
                }
            }
            let entries: Vec<Value> = batch.into_iter().map(|(id, p)| entry(id, p)).collect();
            let msg = Message::new(MsgType::TaskBatch).with("tasks", Value::List(entries));
            if let Some(conn) = self
                .conns
                .values()
                .find(|c| c.manager.as_deref() == Some(&manager))
            {
                self.send(&conn.writer, &msg);
            }
        }
        self.flush_log();
    }

    fn flush_log(&mut self) {
        if let Some(log) = &mut self.dispatch_log {
            let _ = log.flush();
        }
    }

    fn send_heartbeats(&self) {
        let beat = Message::new(MsgType::Heartbeat);
        for c in self.conns.values().filter(|c| c.manager.is_some()) {
            self.send(&c.writer, &beat);
        }
    }

    fn expire_managers(&mut self, now: Instant) {
        let threshold = self.opts.heartbeat_threshold;
        let dead: Vec<String> = self
            .managers
            .values()
            .filter(|m| !m.is_live(now, threshold))
            .map(|m| m.manager_id.clone())
            .collect();
        for m in dead {
            // Dropping the connection entry closes its writer, so a manager
            // that was merely stalled cannot come back.
            self.conns.retain(|_, c| c.manager.as_deref() != Some(&m));
            self.lose(&m, "heartbeat timeout");
        }
    }

    fn lose(&mut self, manager: &str, reason: &str) {
        let Some(rec) = self.managers.remove(manager) else {
            return;
        };
        if rec.blacklisted && rec.outstanding.is_empty() {
            tracing::info!(%manager, reason, "drained manager left");
        } else {
            tracing::warn!(%manager, reason, outstanding = rec.outstanding.len(), "manager lost");
        }
        let tasks: Vec<Value> = rec
            .outstanding
            .iter()
            .map(|t| Value::Int(t.0 as i64))
            .collect();
        self.tell_client(
            &Message::new(MsgType::ManagerLost)
                .with("manager", manager)
                .with("block_id", rec.block_id.as_str())
                .with("reason", reason)
                .with("tasks", Value::List(tasks)),
        );
    }

    fn command(&mut self, msg: Message, reply: Sender<Message>) -> bool {
        let cmd = msg.str("cmd").unwrap_or("").to_string();
        let mut out = Message::new(MsgType::CmdReply).with("cmd", cmd.as_str());
        let mut keep_going = true;
        match cmd.as_str() {
            "OUTSTANDING" => {
                let counts: BTreeMap<String, Value> = self
                    .managers
                    .values()
                    .map(|m| (m.manager_id.clone(), Value::Int(m.outstanding.len() as i64)))
                    .collect();
                out.set("outstanding", Value::Map(counts));
                out.set("queued", self.queue.len() as i64);
            }
            "MANAGERS" => {
                let now = Instant::now();
                let list = self
                    .managers
                    .values()
                    .map(|m| {
                        let mut v = BTreeMap::new();
                        v.insert("manager".into(), Value::str(&m.manager_id));
                        v.insert("block_id".into(), Value::str(&m.block_id));
                        v.insert("workers".into(), Value::Int(m.workers as i64));
                        v.insert("capacity".into(), Value::Int(m.advertised_capacity as i64));
                        v.insert("outstanding".into(), Value::Int(m.outstanding.len() as i64));
                        v.insert("blacklisted".into(), Value::Bool(m.blacklisted));
                        let idle = m
                            .idle_since
                            .map_or(-1, |t| now.duration_since(t).as_micros() as i64);
                        v.insert("idle_us".into(), Value::Int(idle));
                        Value::Map(v)
                    })
                    .collect();
                out.set("managers", Value::List(list));
            }
            "BLACKLIST" => {
                let target = msg.str("manager").unwrap_or("");
                match self.managers.get_mut(target) {
                    Some(m) => {
                        m.blacklisted = true;
                        tracing::info!(manager = target, "manager blacklisted");
                        out.set("outstanding", m.outstanding.len() as i64);
                    }
                    None => out.set("error", format!("unknown manager {target}")),
                }
            }
            "SHUTDOWN" => {
                let stop = Message::new(MsgType::Cmd).with("cmd", "SHUTDOWN");
                for c in self.conns.values().filter(|c| c.manager.is_some()) {
                    self.send(&c.writer, &stop);
                }
                out.set("managers", self.managers.len() as i64);
                keep_going = false;
            }
            other => out.set("error", format!("unknown command {other}")),
        }
        let _ = reply.send(out);
        keep_going
    }
}
