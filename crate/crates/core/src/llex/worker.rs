//! Low-latency worker: one task at a time, straight from the relay.

use std::io::{BufReader, BufWriter, Write};
use std::net::TcpStream;

use crate::executor::ExecutionKernel;
use crate::htex::worker::run_payload;
use crate::value::Value;
use crate::wire::{
    batch_entries, entry, parse_entry, read_message, write_message, Message, MsgType, WireError,
};

#[derive(Debug, Clone)]
pub struct LlexWorkerOptions {
    pub addr: String,
    pub worker_id: String,
    /// Accept tasks and never answer. Used to exercise replication and
    /// timeouts.
    pub drop_tasks: bool,
}

/// Serves tasks until the relay goes away.
pub fn run(opts: LlexWorkerOptions, kernel: &ExecutionKernel) -> Result<(), WireError> {
    let stream = TcpStream::connect(&opts.addr)?;
    stream.set_nodelay(true)?;
    let mut w = BufWriter::new(stream.try_clone()?);
    let mut r = BufReader::new(stream);
    write_message(
        &mut w,
        &Message::new(MsgType::Register).with("worker", opts.worker_id.as_str()),
    )?;
    w.flush()?;
    loop {
        let msg = match read_message(&mut r) {
            Ok(m) => m,
            Err(WireError::Eof) => return Ok(()),
            Err(e) => return Err(e),
        };
        if msg.kind != MsgType::TaskBatch {
            continue;
        }
        if opts.drop_tasks {
            let mut ready =
                Message::new(MsgType::ResultBatch).with("results", Value::List(Vec::new()));
            for key in ["client", "tag"] {
                if let Some(v) = msg.get(key) {
                    ready.set(key, v.clone());
                }
            }
            write_message(&mut w, &ready)?;
            w.flush()?;
            continue;
        }
        let hops = msg.int("hops").unwrap_or(0) + 1;
        let mut results = Vec::new();
        for e in batch_entries(&msg)? {
            let (id, payload) = parse_entry(e)?;
            results.push(entry(id, run_payload(kernel, id, payload, &opts.worker_id)));
        }
        let mut reply = Message::new(MsgType::ResultBatch)
            .with("results", Value::List(results))
            .with("task_hops", hops)
            .with("hops", hops);
        for key in ["client", "tag"] {
            if let Some(v) = msg.get(key) {
                reply.set(key, v.clone());
            }
        }
        write_message(&mut w, &reply)?;
        w.flush()?;
    }
}
