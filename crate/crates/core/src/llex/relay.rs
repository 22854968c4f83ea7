//! Stateless relay between low-latency clients and workers.
//!
//! The relay knows which workers are idle and holds task frames it could
//! not place yet. It keeps nothing about a task once the frame has left.

use std::collections::{HashMap, VecDeque};
use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::wire::{read_message, write_message, Message, MsgType, WireError};

#[derive(Debug, Clone)]
pub struct RelayOptions {
    pub bind: String,
}

type ConnId = u64;

enum Role {
    Client,
    Worker,
}

enum Ev {
    Open(ConnId, Role, Sender<Message>),
    Frame(ConnId, Message),
    Closed(ConnId),
}

fn spawn_writer(mut stream: TcpStream) -> Sender<Message> {
    let (tx, rx) = unbounded::<Message>();
    std::thread::spawn(move || {
        for msg in rx.iter() {
            if write_message(&mut stream, &msg).is_err() {
                return;
            }
        }
    });
    tx
}

fn accept(listener: TcpListener, client_side: bool, events: Sender<Ev>, offset: u64) {
    for (n, stream) in listener.incoming().enumerate() {
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let id = offset + n as ConnId;
        let events = events.clone();
        std::thread::spawn(move || {
            let Ok(w) = stream.try_clone() else { return };
            let role = if client_side {
                Role::Client
            } else {
                Role::Worker
            };
            if events.send(Ev::Open(id, role, spawn_writer(w))).is_err() {
                return;
            }
            let mut r = BufReader::new(stream);
            while let Ok(m) = read_message(&mut r) {
                if events.send(Ev::Frame(id, m)).is_err() {
                    return;
                }
            }
            let _ = events.send(Ev::Closed(id));
        });
    }
}

/// Routing state. Public so it can be driven without sockets.
#[derive(Default)]
pub struct RelayState {
    clients: HashMap<ConnId, Sender<Message>>,
    workers: HashMap<ConnId, Sender<Message>>,
    idle: VecDeque<ConnId>,
    busy: HashMap<ConnId, bool>,
    buffered: VecDeque<Message>,
    seen_client: bool,
}

impl RelayState {
    pub fn buffered(&self) -> usize {
        self.buffered.len()
    }

    fn bump_hops(msg: Message) -> Message {
        let hops = msg.int("hops").unwrap_or(0);
        msg.with("hops", hops + 1)
    }

    /// Distinct workers a frame must reach: its `replicas` field, capped by
    /// the connected workers.
    fn fanout(&self, msg: &Message) -> usize {
        let want = msg.int("replicas").unwrap_or(1).max(1) as usize;
        want.min(self.workers.len()).max(1)
    }

    fn place(&mut self, msg: Message) {
        self.buffered.push_back(msg);
        self.drain();
    }

    /// Sends buffered frames, oldest first, while enough workers are idle.
    fn drain(&mut self) {
        while let Some(head) = self.buffered.front() {
            let need = self.fanout(head);
            if self.idle.len() < need {
                return;
            }
            let msg = self.buffered.pop_front().expect("non-empty");
            let mut sent = 0;
            while sent < need {
                let Some(w) = self.idle.pop_front() else {
                    break;
                };
                if let Some(tx) = self.workers.get(&w) {
                    if tx.send(msg.clone()).is_ok() {
                        self.busy.insert(w, true);
                        sent += 1;
                    }
                }
            }
            if sent == 0 {
                self.buffered.push_front(msg);
                return;
            }
        }
    }

    fn worker_free(&mut self, w: ConnId) {
        self.busy.insert(w, false);
        self.idle.push_back(w);
        self.drain();
    }

    /// Returns false once the last client has gone.
    fn handle(&mut self, ev: Ev) -> bool {
        match ev {
            Ev::Open(id, Role::Client, tx) => {
                self.clients.insert(id, tx);
                self.seen_client = true;
            }
            Ev::Open(id, Role::Worker, tx) => {
                self.workers.insert(id, tx);
                self.busy.insert(id, true);
            }
            Ev::Frame(id, msg) if self.clients.contains_key(&id) => match msg.kind {
                MsgType::TaskBatch => {
                    let msg = Self::bump_hops(msg).with("client", id as i64);
                    self.place(msg);
                }
                MsgType::Cmd => {
                    let reply = Message::new(MsgType::CmdReply)
                        .with("cmd", msg.str("cmd").unwrap_or(""))
                        .with("buffered", self.buffered.len() as i64)
                        .with("tracked_tasks", 0i64)
                        .with("idle_workers", self.idle.len() as i64)
                        .with(
                            "busy_workers",
                            self.busy.values().filter(|b| **b).count() as i64,
                        )
                        .with("workers", self.workers.len() as i64);
                    let _ = self.clients[&id].send(reply);
                }
                _ => {}
            },
            Ev::Frame(id, msg) if self.workers.contains_key(&id) => match msg.kind {
                MsgType::Register => self.worker_free(id),
                MsgType::ResultBatch => {
                    let client = msg.int("client").unwrap_or(-1);
                    let msg = Self::bump_hops(msg);
                    if let Some(tx) = self.clients.get(&(client as ConnId)) {
                        let _ = tx.send(msg);
                    }
                    self.worker_free(id);
                }
                _ => {}
            },
            Ev::Frame(..) => {}
            Ev::Closed(id) => {
                if self.clients.remove(&id).is_some() {
                    return !(self.seen_client && self.clients.is_empty());
                }
                self.workers.remove(&id);
                self.busy.remove(&id);
                self.idle.retain(|w| *w != id);
                self.drain();
            }
        }
        true
    }
}

/// Binds the client and worker ports, announces them on stdout and relays
/// until the last client disconnects.
pub fn run(opts: RelayOptions) -> Result<(), WireError> {
    let clients = TcpListener::bind(format!("{}:0", opts.bind))?;
    let workers = TcpListener::bind(format!("{}:0", opts.bind))?;
    println!(
        "PILOTFLOW_RELAY {} {}",
        clients.local_addr()?.port(),
        workers.local_addr()?.port()
    );
    std::io::stdout().flush()?;
    let (tx, rx) = unbounded();
    let t2 = tx.clone();
    std::thread::spawn(move || accept(clients, true, t2, 0));
    std::thread::spawn(move || accept(workers, false, tx, 1 << 32));
    route(rx);
    Ok(())
}

fn route(rx: Receiver<Ev>) {
    let mut state = RelayState::default();
    for ev in rx.iter() {
        if !state.handle(ev) {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(n: i64) -> Message {
        Message::new(MsgType::TaskBatch).with("tag", n)
    }

    #[test]
    fn buffers_until_a_worker_is_free() {
        let mut s = RelayState::default();
        let (ctx, crx) = unbounded();
        let (wtx, wrx) = unbounded();
        s.handle(Ev::Open(1, Role::Client, ctx));
        s.handle(Ev::Frame(1, task(7)));
        assert_eq!(s.buffered(), 1);
        s.handle(Ev::Open(2, Role::Worker, wtx));
        s.handle(Ev::Frame(2, Message::new(MsgType::Register)));
        assert_eq!(s.buffered(), 0);
        let got = wrx.try_recv().unwrap();
        assert_eq!(got.int("hops"), Some(1));
        assert_eq!(got.int("client"), Some(1));

        let reply = Message::new(MsgType::ResultBatch)
            .with("client", 1i64)
            .with("hops", 1i64);
        s.handle(Ev::Frame(2, reply));
        assert_eq!(crx.try_recv().unwrap().int("hops"), Some(2));
        assert_eq!(s.idle.len(), 1);
    }

    #[test]
    fn replicas_go_to_distinct_workers() {
        let mut s = RelayState::default();
        let (ctx, _crx) = unbounded();
        s.handle(Ev::Open(1, Role::Client, ctx));
        let mut rxs = Vec::new();
        for id in [2, 3] {
            let (tx, rx) = unbounded();
            s.handle(Ev::Open(id, Role::Worker, tx));
            rxs.push(rx);
        }
        s.handle(Ev::Frame(2, Message::new(MsgType::Register)));
        s.handle(Ev::Frame(1, task(1).with("replicas", 2i64)));
        // One idle worker is not enough for two replicas.
        assert_eq!(s.buffered(), 1);
        s.handle(Ev::Frame(3, Message::new(MsgType::Register)));
        assert_eq!(s.buffered(), 0);
        for rx in &rxs {
            assert_eq!(rx.try_recv().unwrap().int("tag"), Some(1));
            assert!(rx.try_recv().is_err());
        }
    }

    #[test]
    fn replicas_are_capped_by_connected_workers() {
        let mut s = RelayState::default();
        let (ctx, _crx) = unbounded();
        let (wtx, wrx) = unbounded();
        s.handle(Ev::Open(1, Role::Client, ctx));
        s.handle(Ev::Open(2, Role::Worker, wtx));
        s.handle(Ev::Frame(2, Message::new(MsgType::Register)));
        s.handle(Ev::Frame(1, task(4).with("replicas", 3i64)));
        assert_eq!(s.buffered(), 0);
        assert_eq!(wrx.try_recv().unwrap().int("tag"), Some(4));
    }

    #[test]
    fn exits_when_last_client_leaves() {
        let mut s = RelayState::default();
        let (ctx, _crx) = unbounded();
        s.handle(Ev::Open(1, Role::Client, ctx));
        assert!(!s.handle(Ev::Closed(1)));
    }
}
