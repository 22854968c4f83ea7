//! Worker process: runs one task at a time, fed over stdin/stdout by its
//! manager.

use std::io::{BufReader, BufWriter, Read, Write};

use crate::clock::epoch_us;
use crate::executor::ExecutionKernel;
use crate::task::TaskError;
use crate::value::Value;
use crate::wire::{
    batch_entries, entry, parse_entry, read_message, write_message, Message, MsgType,
    ResultPayload, TaskPayload, WireError,
};

/// Executes one encoded task and returns the encoded result payload.
pub fn run_payload(
    kernel: &ExecutionKernel,
    task_id: crate::value::TaskId,
    payload: &[u8],
    worker: &str,
) -> Vec<u8> {
    let start_us = epoch_us();
    let (attempt, outcome) = match crate::codec::decode(payload)
        .map_err(WireError::from)
        .and_then(|v| TaskPayload::from_value(&v))
    {
        Ok(t) => (
            t.attempt,
            kernel.execute(task_id, t.attempt, &t.app, &t.args, &t.kwargs),
        ),
        Err(e) => (0, Err(TaskError::Serialization(e.to_string()))),
    };
    ResultPayload {
        attempt,
        outcome,
        start_us,
        end_us: epoch_us(),
        worker: worker.to_string(),
    }
    .encode()
}

/// Serves tasks until the input stream closes.
pub fn serve(
    kernel: &ExecutionKernel,
    worker: &str,
    input: impl Read,
    output: impl Write,
) -> Result<(), WireError> {
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    loop {
        let msg = match read_message(&mut input) {
            Ok(m) => m,
            Err(WireError::Eof) => return Ok(()),
            Err(e) => return Err(e),
        };
        if msg.kind != MsgType::TaskBatch {
            continue;
        }
        let mut results = Vec::new();
        for e in batch_entries(&msg)? {
            let (id, payload) = parse_entry(e)?;
            results.push(entry(id, run_payload(kernel, id, payload, worker)));
        }
        let reply = Message::new(MsgType::ResultBatch).with("results", Value::List(results));
        write_message(&mut output, &reply)?;
        output.flush()?;
    }
}

/// Arranges for this process to die with its parent.
pub fn die_with_parent() {
    // SAFETY: prctl(PR_SET_PDEATHSIG) and getppid have no memory-safety
    // preconditions.
    unsafe {
        libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
        if libc::getppid() == 1 {
            libc::_exit(1);
        }
    }
}
