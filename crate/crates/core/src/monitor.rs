//! Task and resource monitoring.
//!
//! Events go to a [`MonitorSink`]. The file sink writes one tab-separated
//! line per event after a header line:
//!
//! ```text
//! #pilotflow-monitor    version=1    run=<id>    seed=<seed>
//! <ts_us>    <task_id|->    <kind>    <field>=<value>...
//! ```
//!
//! Timestamps are microseconds since the run started. Field values escape
//! `%`, tab and newline as `%25`, `%09` and `%0A`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::clock::RunClock;
use crate::task::TaskState;
use crate::value::TaskId;

pub const LOG_MAGIC: &str = "#pilotflow-monitor";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    StateChange {
        from: Option<TaskState>,
        to: TaskState,
    },
    Dispatch {
        executor: String,
    },
    Manager {
        event: String,
        manager: String,
        workers: usize,
    },
    Block {
        block: String,
        state: String,
    },
    Stage {
        uri: String,
        phase: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorEvent {
    pub timestamp_us: u64,
    pub task_id: Option<TaskId>,
    pub kind: EventKind,
    pub detail: BTreeMap<String, String>,
}

impl MonitorEvent {
    pub fn new(timestamp_us: u64, task_id: Option<TaskId>, kind: EventKind) -> Self {
        MonitorEvent {
            timestamp_us,
            task_id,
            kind,
            detail: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.detail.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_line(&self) -> String {
        let mut fields: Vec<(String, String)> = Vec::new();
        let kind = match &self.kind {
            EventKind::StateChange { from, to } => {
                fields.push(("from".into(), from.map_or("-".into(), |s| s.to_string())));
                fields.push(("to".into(), to.to_string()));
                "state"
            }
            EventKind::Dispatch { executor } => {
                fields.push(("executor".into(), executor.clone()));
                "dispatch"
            }
            EventKind::Manager {
                event,
                manager,
                workers,
            } => {
                fields.push(("event".into(), event.clone()));
                fields.push(("manager".into(), manager.clone()));
                fields.push(("workers".into(), workers.to_string()));
                "manager"
            }
            EventKind::Block { block, state } => {
                fields.push(("block".into(), block.clone()));
                fields.push(("state".into(), state.clone()));
                "block"
            }
            EventKind::Stage { uri, phase } => {
                fields.push(("uri".into(), uri.clone()));
                fields.push(("phase".into(), phase.clone()));
                "stage"
            }
        };
        let mut line = format!(
            "{}\t{}\t{}",
            self.timestamp_us,
            self.task_id.map_or("-".into(), |t| t.to_string()),
            kind
        );
        let detail = self.detail.iter().map(|(k, v)| (k.as_str(), v.as_str()));
        for (k, v) in fields
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .chain(detail)
        {
            line.push('\t');
            line.push_str(&escape(k));
            line.push('=');
            line.push_str(&escape(v));
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<MonitorEvent, LogError> {
        let bad = |reason: &str| LogError::Malformed {
            line: line.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = line.split('\t');
        let ts = parts
            .next()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| bad("bad timestamp"))?;
        let task = match parts.next().ok_or_else(|| bad("missing task id"))? {
            "-" => None,
            s => Some(TaskId(s.parse().map_err(|_| bad("bad task id"))?)),
        };
        let kind = parts.next().ok_or_else(|| bad("missing kind"))?;
        let mut fields = Vec::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad("field without ="))?;
            fields.push((unescape(k), unescape(v)));
        }
        // Kind fields are written first, so a detail key may repeat one later.
        let mut take = |k: &str| match fields.iter().position(|(f, _)| f == k) {
            Some(i) => Ok(fields.remove(i).1),
            None => Err(bad(&format!("missing field {k}"))),
        };
        let kind = match kind {
            "state" => {
                let from = take("from")?;
                let to = take("to")?;
                EventKind::StateChange {
                    from: if from == "-" {
                        None
                    } else {
                        Some(from.parse().map_err(|e: String| bad(&e))?)
                    },
                    to: to.parse().map_err(|e: String| bad(&e))?,
                }
            }
            "dispatch" => EventKind::Dispatch {
                executor: take("executor")?,
            },
            "manager" => EventKind::Manager {
                event: take("event")?,
                manager: take("manager")?,
                workers: take("workers")?
                    .parse()
                    .map_err(|_| bad("bad worker count"))?,
            },
            "block" => EventKind::Block {
                block: take("block")?,
                state: take("state")?,
            },
            "stage" => EventKind::Stage {
                uri: take("uri")?,
                phase: take("phase")?,
            },
            _ => return Err(bad("unknown event kind")),
        };
        Ok(MonitorEvent {
            timestamp_us: ts,
            task_id: task,
            kind,
            detail: fields.into_iter().collect(),
        })
    }
}

fn escape(s: &str) -> String {
    if !s.contains(['%', '\t', '\n', '\r']) {
        return s.to_string();
    }
    s.replace('%', "%25")
        .replace('\t', "%09")
        .replace('\n', "%0A")
        .replace('\r', "%0D")
}

fn unescape(s: &str) -> String {
    if !s.contains('%') {
        return s.to_string();
    }
    s.replace("%09", "\t")
        .replace("%0A", "\n")
        .replace("%0D", "\r")
        .replace("%25", "%")
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("malformed monitor record `{line}`: {reason}")]
    Malformed { line: String, reason: String },
    #[error("missing or invalid header line")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Destination for monitor events.
pub trait MonitorSink: Send + Sync {
    fn append(&self, event: &MonitorEvent) -> io::Result<()>;
    fn flush(&self) -> io::Result<()>;
    /// Lets emitters skip building events nobody records.
    fn enabled(&self) -> bool {
        true
    }
}

pub struct NullSink;

impl MonitorSink for NullSink {
    fn append(&self, _: &MonitorEvent) -> io::Result<()> {
        Ok(())
    }
    fn flush(&self) -> io::Result<()> {
        Ok(())
    }
    fn enabled(&self) -> bool {
        false
    }
}

#[derive(Default)]
pub struct MemorySink {
    events: Mutex<Vec<MonitorEvent>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<MonitorEvent> {
        self.events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}

impl MonitorSink for MemorySink {
    fn append(&self, event: &MonitorEvent) -> io::Result<()> {
        self.events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(event.clone());
        Ok(())
    }
    fn flush(&self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogHeader {
    pub version: u32,
    pub run_id: String,
    pub seed: u64,
}

impl LogHeader {
    pub fn to_line(&self) -> String {
        format!(
            "{LOG_MAGIC}\tversion={}\trun={}\tseed={}",
            self.version, self.run_id, self.seed
        )
    }

    pub fn parse(line: &str) -> Option<LogHeader> {
        let mut parts = line.split('\t');
        if parts.next()? != LOG_MAGIC {
            return None;
        }
        let mut fields = BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=')?;
            fields.insert(k, v);
        }
        Some(LogHeader {
            version: fields.get("version")?.parse().ok()?,
            run_id: fields.get("run")?.to_string(),
            seed: fields.get("seed")?.parse().ok()?,
        })
    }
}

/// Line-per-event file sink. Each line is written whole under a lock, so
/// concurrent emitters never interleave.
pub struct FileSink {
    out: Mutex<BufWriter<File>>,
}

impl FileSink {
    pub fn create(path: impl AsRef<Path>, header: &LogHeader) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.to_line())?;
        out.flush()?;
        Ok(FileSink {
            out: Mutex::new(out),
        })
    }
}

impl MonitorSink for FileSink {
    fn append(&self, event: &MonitorEvent) -> io::Result<()> {
        let mut line = event.to_line();
        line.push('\n');
        self.out
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .write_all(line.as_bytes())
    }

    fn flush(&self) -> io::Result<()> {
        self.out.lock().unwrap_or_else(|e| e.into_inner()).flush()
    }
}

impl Drop for FileSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Sink plus the run clock; cheap to clone into executors.
#[derive(Clone)]
pub struct Monitor {
    sink: Arc<dyn MonitorSink>,
    clock: RunClock,
    warned: Arc<AtomicBool>,
}

impl Monitor {
    pub fn new(sink: Arc<dyn MonitorSink>, clock: RunClock) -> Self {
        Monitor {
            sink,
            clock,
            warned: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn disabled() -> Self {
        Monitor::new(Arc::new(NullSink), RunClock::new())
    }

    pub fn clock(&self) -> &RunClock {
        &self.clock
    }

    pub fn enabled(&self) -> bool {
        self.sink.enabled()
    }

    pub fn emit(&self, event: MonitorEvent) {
        if let Err(e) = self.sink.append(&event) {
            if !self.warned.swap(true, Ordering::Relaxed) {
                tracing::warn!("monitor sink write failed: {e}");
            }
        }
    }

    /// Emits an event stamped with the current run time.
    pub fn now(&self, task_id: Option<TaskId>, kind: EventKind) -> MonitorEvent {
        MonitorEvent::new(self.clock.now_us(), task_id, kind)
    }

    pub fn flush(&self) {
        let _ = self.sink.flush();
    }
}

#[derive(Debug, Clone)]
pub struct ParsedLog {
    pub header: LogHeader,
    pub events: Vec<MonitorEvent>,
}

pub fn parse_log(text: &str) -> Result<ParsedLog, LogError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(LogHeader::parse)
        .ok_or(LogError::MissingHeader)?;
    let events = lines
        .filter(|l| !l.is_empty())
        .map(MonitorEvent::parse_line)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ParsedLog { header, events })
}

pub fn read_log(path: impl AsRef<Path>) -> Result<ParsedLog, LogError> {
    parse_log(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("task {task}: illegal transition {from:?} -> {to}")]
    IllegalTransition {
        task: TaskId,
        from: Option<TaskState>,
        to: TaskState,
    },
    #[error("task {task}: event at {at}us precedes the previous one")]
    OutOfOrder { task: TaskId, at: u64 },
    #[error("task {0} has no terminal state")]
    NotTerminal(TaskId),
}

/// Rebuilds each task's state history from the log and checks that it is a
/// path through the lifecycle graph ending in a terminal state.
pub fn replay_histories(
    events: &[MonitorEvent],
) -> Result<BTreeMap<TaskId, Vec<TaskState>>, ReplayError> {
    let mut histories: BTreeMap<TaskId, (Vec<TaskState>, u64)> = BTreeMap::new();
    for e in events {
        let (Some(task), EventKind::StateChange { from, to }) = (e.task_id, &e.kind) else {
            continue;
        };
        let entry = histories.entry(task).or_insert_with(|| (Vec::new(), 0));
        if e.timestamp_us < entry.1 {
            return Err(ReplayError::OutOfOrder {
                task,
                at: e.timestamp_us,
            });
        }
        entry.1 = e.timestamp_us;
        let current = entry.0.last().copied();
        let legal = match (current, from) {
            (None, None) => *to == TaskState::Pending,
            (Some(cur), Some(f)) => cur == *f && cur.can_transition(*to),
            _ => false,
        };
        if !legal {
            return Err(ReplayError::IllegalTransition {
                task,
                from: *from,
                to: *to,
            });
        }
        entry.0.push(*to);
    }
    let mut out = BTreeMap::new();
    for (task, (states, _)) in histories {
        if !states.last().is_some_and(|s| s.is_terminal()) {
            return Err(ReplayError::NotTerminal(task));
        }
        out.insert(task, states);
    }
    Ok(out)
}

#[derive(Debug, Error, PartialEq)]
pub enum UtilizationError {
    #[error("incomplete log: {0}")]
    IncompleteLog(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    /// Percentage in [0, 100].
    pub utilization: f64,
    pub makespan_us: u64,
    pub task_busy_us: u64,
    pub worker_time_us: u64,
    pub busy_intervals: BTreeMap<String, Vec<(u64, u64)>>,
}

/// Ratio of total task busy time to total worker lifetime.
///
/// Worker lifetimes come from manager `registered`/`lost`/`exited` events
/// and are clipped to the makespan window (first launch to last
/// completion); a manager with no exit event is alive until the window
/// closes.
pub fn compute_utilization(events: &[MonitorEvent]) -> Result<Utilization, UtilizationError> {
    let incomplete = |s: &str| UtilizationError::IncompleteLog(s.to_string());
    let mut first_launch: Option<u64> = None;
    let mut running: BTreeMap<TaskId, (u64, String)> = BTreeMap::new();
    let mut busy: BTreeMap<String, Vec<(u64, u64)>> = BTreeMap::new();
    let mut last_end = 0u64;
    let mut managers: BTreeMap<String, (u64, Option<u64>, usize)> = BTreeMap::new();

    for e in events {
        match &e.kind {
            EventKind::StateChange { to, .. } => {
                let Some(task) = e.task_id else { continue };
                match to {
                    TaskState::Launched => {
                        first_launch =
                            Some(first_launch.map_or(e.timestamp_us, |f| f.min(e.timestamp_us)));
                    }
                    TaskState::Running => {
                        let worker = e.detail.get("worker").cloned().unwrap_or_default();
                        running.insert(task, (e.timestamp_us, worker));
                    }
                    TaskState::Succeeded | TaskState::Failed => {
                        let end = e
                            .detail
                            .get("run_end")
                            .and_then(|v| v.parse().ok())
                            .unwrap_or(e.timestamp_us);
                        if let Some((start, worker)) = running.remove(&task) {
                            busy.entry(worker)
                                .or_default()
                                .push((start, end.max(start)));
                            last_end = last_end.max(end);
                        }
                    }
                    _ => {}
                }
            }
            EventKind::Manager {
                event,
                manager,
                workers,
            } => match event.as_str() {
                "registered" => {
                    managers.insert(manager.clone(), (e.timestamp_us, None, *workers));
                }
                "lost" | "exited" => {
                    if let Some(m) = managers.get_mut(manager) {
                        m.1.get_or_insert(e.timestamp_us);
                    }
                }
                _ => {}
            },
            _ => {}
        }
    }

    if !running.is_empty() {
        return Err(incomplete("tasks still running at end of log"));
    }
    let start = first_launch.ok_or_else(|| incomplete("no task was launched"))?;
    if busy.is_empty() {
        return Err(incomplete("no task ran on a worker"));
    }
    if managers.is_empty() {
        return Err(incomplete("no worker lifetimes recorded"));
    }
    let end = last_end.max(start);
    let worker_time: u64 = managers
        .values()
        .map(|(born, died, workers)| {
            let lo = (*born).max(start);
            let hi = died.unwrap_or(end).min(end);
            hi.saturating_sub(lo) * *workers as u64
        })
        .sum();
    let task_busy: u64 = busy
        .values()
        .flatten()
        .map(|(s, e)| e.min(&end).saturating_sub((*s).max(start)))
        .sum();
    if worker_time == 0 {
        return Err(incomplete("zero worker time inside the makespan window"));
    }
    Ok(Utilization {
        utilization: 100.0 * task_busy as f64 / worker_time as f64,
        makespan_us: end - start,
        task_busy_us: task_busy,
        worker_time_us: worker_time,
        busy_intervals: busy,
    })
}
