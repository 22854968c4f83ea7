//! Programs the `run` verb can execute: built-in demos and task-list files.
//!
//! A task-list file has one task per line: an app name followed by
//! whitespace-separated arguments. Integers and floats are parsed as
//! numbers, `@N` is the result of the N-th task (0-based), `key=value` is a
//! keyword argument and anything else is a string. `#` starts a comment.

use std::path::{Path, PathBuf};
use std::time::Duration;

use pilotflow_core::{Call, DataFlowKernel, FutureHandle, SubmitError, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Submit(#[from] SubmitError),
}

/// Durations of the four-stage workflow: wide map stages and single-task
/// reduce stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourStage {
    pub width: usize,
    pub wide: Duration,
    pub reduce: Duration,
}

impl Default for FourStage {
    fn default() -> Self {
        FourStage {
            width: 20,
            wide: Duration::from_secs(2),
            reduce: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Program {
    Hello,
    /// One task fans out to two which join into a fourth.
    Diamond,
    FourStage(FourStage),
    TaskList(PathBuf),
}

impl Program {
    /// A built-in name or the path of a task-list file.
    pub fn parse(name: &str) -> Program {
        match name {
            "hello" => Program::Hello,
            "diamond" => Program::Diamond,
            "four-stage" => Program::FourStage(FourStage::default()),
            path => Program::TaskList(PathBuf::from(path)),
        }
    }

    /// Submits the program; returns the futures whose results are printed.
    pub fn submit(&self, dfk: &DataFlowKernel) -> Result<Vec<FutureHandle>, ProgramError> {
        match self {
            Program::Hello => Ok(vec![dfk.call("hello", vec![Value::str("World")])?]),
            Program::Diamond => {
                let top = dfk.call("add", vec![Value::Int(1), Value::Int(2)])?;
                let left = dfk.call("mul", vec![top.as_arg(), Value::Int(10)])?;
                let right = dfk.call("add", vec![top.as_arg(), Value::Int(5)])?;
                Ok(vec![dfk.call("add", vec![left.as_arg(), right.as_arg()])?])
            }
            Program::FourStage(f) => Ok(vec![four_stage(dfk, f)?]),
            Program::TaskList(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ProgramError::Read {
                    path: path.clone(),
                    source,
                })?;
                task_list(dfk, path, &text)
            }
        }
    }
}

fn sleep_ms(d: Duration) -> Value {
    Value::Float(d.as_secs_f64() * 1000.0)
}

/// Submits the four-stage workflow and returns the final reduce task.
pub fn four_stage(dfk: &DataFlowKernel, f: &FourStage) -> Result<FutureHandle, SubmitError> {
    let sleep = dfk.app("sleep")?;
    let stage =
        |deps: Vec<Value>, d: Duration, n: usize| -> Result<Vec<FutureHandle>, SubmitError> {
            (0..n)
                .map(|_| {
                    let args = std::iter::once(sleep_ms(d)).chain(deps.iter().cloned());
                    dfk.submit(Call::new(sleep.clone()).args(args))
                })
                .collect()
        };
    let map1 = stage(vec![], f.wide, f.width)?;
    let reduce1 = stage(map1.iter().map(FutureHandle::as_arg).collect(), f.reduce, 1)?;
    let map2 = stage(vec![reduce1[0].as_arg()], f.wide, f.width)?;
    let reduce2 = stage(map2.iter().map(FutureHandle::as_arg).collect(), f.reduce, 1)?;
    Ok(reduce2.into_iter().next().expect("one reduce task"))
}

fn parse_token(tok: &str, earlier: &[FutureHandle]) -> Result<Value, String> {
    if let Some(n) = tok.strip_prefix('@') {
        let i: usize = n
            .parse()
            .map_err(|_| format!("bad task reference {tok:?}"))?;
        return earlier
            .get(i)
            .map(FutureHandle::as_arg)
            .ok_or_else(|| format!("task {i} is not defined before this line"));
    }
    if let Ok(i) = tok.parse::<i64>() {
        return Ok(Value::Int(i));
    }
    if let Ok(f) = tok.parse::<f64>() {
        return Ok(Value::Float(f));
    }
    Ok(Value::str(tok))
}

/// Submits every task of a task-list file; returns all futures in order.
pub fn task_list(
    dfk: &DataFlowKernel,
    path: &Path,
    text: &str,
) -> Result<Vec<FutureHandle>, ProgramError> {
    let mut futures: Vec<FutureHandle> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| ProgramError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let mut toks = line.split_whitespace();
        let app_name = toks.next().expect("non-empty line");
        let app = dfk.app(app_name).map_err(|e| err(e.to_string()))?;
        let mut call = Call::new(app);
        for tok in toks {
            match tok.split_once('=') {
                Some((k, v)) if !k.is_empty() => {
                    call = call.kwarg(k, parse_token(v, &futures).map_err(err)?);
                }
                _ => call = call.arg(parse_token(tok, &futures).map_err(err)?),
            }
        }
        futures.push(dfk.submit(call)?);
    }
    Ok(futures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_paths() {
        assert_eq!(Program::parse("hello"), Program::Hello);
        assert_eq!(
            Program::parse("tasks.txt"),
            Program::TaskList("tasks.txt".into())
        );
    }

    #[test]
    fn tokens() {
        assert_eq!(parse_token("42", &[]), Ok(Value::Int(42)));
        assert_eq!(parse_token("2.5", &[]), Ok(Value::Float(2.5)));
        assert_eq!(parse_token("abc", &[]), Ok(Value::str("abc")));
        assert!(parse_token("@0", &[]).is_err());
    }
}
