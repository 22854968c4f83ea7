//! Random task graphs and a serial reference evaluator.

use std::collections::BTreeSet;

use pilotflow_core::dfk::TaskSummary;
use pilotflow_core::{
    Call, DataFlowKernel, FutureHandle, Kwargs, Registry, TaskError, TaskId, Value,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub enum Arg {
    Const(i64),
    Node(usize),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub app: &'static str,
    pub args: Vec<Arg>,
}

#[derive(Debug, Clone)]
pub struct Dag {
    pub nodes: Vec<Node>,
}

impl Dag {
    pub fn edges(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.args.iter().filter(|a| matches!(a, Arg::Node(_))).count())
            .sum()
    }
}

/// Up to `max_tasks` nodes of pure integer apps; at most `max_failures`
/// nodes are replaced by the failing app.
pub fn random_dag(seed: u64, max_tasks: usize, max_failures: usize) -> Dag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_tasks);
    let apps = ["add", "mul", "mix", "identity"];
    let mut nodes: Vec<Node> = (0..n)
        .map(|i| {
            let app = apps[rng.gen_range(0..apps.len())];
            let arity = if app == "identity" {
                1
            } else {
                rng.gen_range(1..=3)
            };
            let args = (0..arity)
                .map(|_| {
                    if i > 0 && rng.gen_bool(0.7) {
                        Arg::Node(rng.gen_range(i.saturating_sub(20)..i))
                    } else {
                        Arg::Const(rng.gen_range(-50..50))
                    }
                })
                .collect();
            Node { app, args }
        })
        .collect();
    let failures = rng.gen_range(0..=max_failures.min(n));
    for _ in 0..failures {
        let i = rng.gen_range(0..n);
        nodes[i].app = "fail";
    }
    Dag { nodes }
}

/// What the serial evaluator expects of one node.
#[derive(Debug, Clone, PartialEq)]
pub enum Expected {
    Value(Value),
    /// The app itself fails with this error.
    Error(TaskError),
    /// Fails because one of these failed ancestors failed.
    Upstream(BTreeSet<usize>),
}

pub fn serial_reference(dag: &Dag, registry: &Registry) -> Vec<Expected> {
    let mut out: Vec<Expected> = Vec::with_capacity(dag.nodes.len());
    for node in &dag.nodes {
        let mut roots = BTreeSet::new();
        let mut args = Vec::new();
        for a in &node.args {
            match a {
                Arg::Const(c) => args.push(Value::Int(*c)),
                Arg::Node(j) => match &out[*j] {
                    Expected::Value(v) => args.push(v.clone()),
                    Expected::Error(_) => {
                        roots.insert(*j);
                    }
                    Expected::Upstream(r) => roots.extend(r.iter().copied()),
                },
            }
        }
        let e = if !roots.is_empty() {
            Expected::Upstream(roots)
        } else {
            match registry.call(node.app, &args, &Kwargs::new()) {
                Ok(v) => Expected::Value(v),
                Err(e) => Expected::Error(e),
            }
        };
        out.push(e);
    }
    out
}

pub fn submit_dag(dfk: &DataFlowKernel, dag: &Dag) -> Vec<FutureHandle> {
    let mut handles: Vec<FutureHandle> = Vec::with_capacity(dag.nodes.len());
    for node in &dag.nodes {
        let args = node.args.iter().map(|a| match a {
            Arg::Const(c) => Value::Int(*c),
            Arg::Node(j) => handles[*j].as_arg(),
        });
        let call = Call::new(dfk.app(node.app).unwrap()).args(args);
        handles.push(dfk.submit(call).unwrap());
    }
    handles
}

/// Compares outcomes against the reference; returns a description of the
/// first mismatch.
pub fn check_outcomes(handles: &[FutureHandle], expected: &[Expected]) -> Result<(), String> {
    let index_of = |id: TaskId| handles.iter().position(|h| h.task_id() == id);
    for (i, (h, e)) in handles.iter().zip(expected).enumerate() {
        let got = h.result();
        let ok = match (e, &got) {
            (Expected::Value(v), Ok(g)) => v == g,
            (Expected::Error(err), Err(g)) => err == g,
            (Expected::Upstream(roots), Err(TaskError::Dependency { root, .. })) => {
                index_of(*root).is_some_and(|r| roots.contains(&r))
            }
            _ => false,
        };
        if !ok {
            return Err(format!("node {i}: expected {e:?}, got {got:?}"));
        }
    }
    Ok(())
}

/// Every edge must have its producer complete before the consumer
/// launches.
pub fn check_edge_order(tasks: &[TaskSummary]) -> Result<(), String> {
    for t in tasks {
        let Some(launch) = t.first_launch_time else {
            continue;
        };
        for d in &t.depends_on {
            let dep = &tasks[d.0 as usize];
            match dep.complete_time {
                Some(c) if c <= launch => {}
                other => {
                    return Err(format!(
                        "task {} launched at {launch} before dependency {} completed ({other:?})",
                        t.task_id, dep.task_id
                    ))
                }
            }
        }
    }
    Ok(())
}
