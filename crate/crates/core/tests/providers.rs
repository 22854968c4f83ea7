mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::*;
use pilotflow_core::htex::HtexExecutor;
use pilotflow_core::provider::{
    BlockState, LaunchCommand, LauncherSpec, LocalProvider, Provider, ProviderError, QueueDelay,
    SimLrmConfig, SimLrmProvider, ENV_NODE_INDEX,
};
use pilotflow_core::{EngineConfig, Value};

fn sh(script: &str) -> LaunchCommand {
    LaunchCommand::new("/bin/sh").arg("-c").arg(script)
}

fn recorder(provider: &dyn Provider) -> Arc<Mutex<Vec<(String, BlockState)>>> {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = seen.clone();
    provider.set_observer(Arc::new(move |id: &str, s| {
        sink.lock().unwrap().push((id.to_string(), s))
    }));
    seen
}

fn settle(p: &dyn Provider, h: &pilotflow_core::provider::JobHandle) -> BlockState {
    assert!(wait_until(Duration::from_secs(5), || p
        .status(h)
        .unwrap()
        .is_terminal()));
    p.status(h).unwrap()
}

#[test]
fn local_block_runs_to_completion() {
    let p = LocalProvider::new("local");
    let seen = recorder(&p);
    let h = p.submit("b-0", &sh("sleep 0.1")).unwrap();
    assert_eq!(p.status(&h).unwrap(), BlockState::Active);
    assert_eq!(settle(&p, &h), BlockState::Done);
    let states: Vec<BlockState> = seen.lock().unwrap().iter().map(|(_, s)| *s).collect();
    assert_eq!(
        states,
        [
            BlockState::Queued,
            BlockState::Active,
            BlockState::Terminating,
            BlockState::Done
        ]
    );
}

#[test]
fn failing_block_is_failed() {
    let p = LocalProvider::new("local");
    let h = p.submit("b-0", &sh("exit 4")).unwrap();
    assert_eq!(settle(&p, &h), BlockState::Failed);
}

#[test]
fn cancel_kills_and_is_idempotent() {
    let p = LocalProvider::new("local");
    let h = p.submit("b-0", &sh("sleep 30")).unwrap();
    let start = Instant::now();
    p.cancel(&h).unwrap();
    assert_eq!(settle(&p, &h), BlockState::Done);
    assert!(start.elapsed() < Duration::from_secs(3));
    p.cancel(&h).unwrap();
    assert_eq!(p.status(&h).unwrap(), BlockState::Done);
    assert!(matches!(
        p.status(&pilotflow_core::provider::JobHandle("nope".into())),
        Err(ProviderError::UnknownJob(_))
    ));
}

#[test]
fn blocks_are_independent() {
    let p = LocalProvider::new("local");
    let a = p.submit("a", &sh("sleep 30")).unwrap();
    let b = p.submit("b", &sh("sleep 30")).unwrap();
    assert!(matches!(
        p.submit("a", &sh("true")),
        Err(ProviderError::DuplicateJob(_))
    ));
    p.cancel(&a).unwrap();
    assert_eq!(settle(&p, &a), BlockState::Done);
    assert_eq!(p.status(&b).unwrap(), BlockState::Active);
    p.cancel(&b).unwrap();
    assert_eq!(settle(&p, &b), BlockState::Done);
}

#[test]
fn missing_program_fails_the_submit() {
    let p = LocalProvider::new("local");
    let err = p
        .submit("x", &LaunchCommand::new("/nonexistent/agent"))
        .unwrap_err();
    assert!(matches!(err, ProviderError::Spawn { .. }));
}

#[test]
fn sim_queue_delay_holds_the_block() {
    let delay = Duration::from_millis(500);
    let p = SimLrmProvider::new(
        "sim",
        SimLrmConfig {
            queue_delay: QueueDelay::Fixed(delay),
            ..SimLrmConfig::default()
        },
    );
    let start = Instant::now();
    let h = p.submit("b-0", &sh("sleep 30")).unwrap();
    assert_eq!(p.status(&h).unwrap(), BlockState::Queued);
    assert!(wait_until(Duration::from_secs(3), || p.status(&h).unwrap()
        == BlockState::Active));
    let waited = start.elapsed();
    assert!(
        waited >= delay && waited <= delay + Duration::from_millis(100),
        "{waited:?}"
    );
    p.cancel(&h).unwrap();
    assert_eq!(settle(&p, &h), BlockState::Done);
}

#[test]
fn sim_cancel_while_queued() {
    let p = SimLrmProvider::new(
        "sim",
        SimLrmConfig {
            queue_delay: QueueDelay::Fixed(Duration::from_secs(30)),
            ..SimLrmConfig::default()
        },
    );
    let h = p.submit("b-0", &sh("true")).unwrap();
    p.cancel(&h).unwrap();
    assert_eq!(settle(&p, &h), BlockState::Done);
}

#[test]
fn sim_failure_rate_one_refuses_every_block() {
    let p = SimLrmProvider::new(
        "sim",
        SimLrmConfig {
            failure_rate: 1.0,
            ..SimLrmConfig::default()
        },
    );
    for i in 0..5 {
        let h = p.submit(&format!("b-{i}"), &sh("sleep 30")).unwrap();
        assert_eq!(settle(&p, &h), BlockState::Failed);
    }
}

#[test]
fn sim_caps_active_blocks_and_enforces_walltime() {
    let p = SimLrmProvider::new(
        "sim",
        SimLrmConfig {
            max_active_blocks: 1,
            walltime: Some(Duration::from_millis(300)),
            ..SimLrmConfig::default()
        },
    );
    let a = p.submit("a", &sh("sleep 30")).unwrap();
    let b = p.submit("b", &sh("sleep 30")).unwrap();
    assert!(wait_until(Duration::from_secs(2), || p.status(&a).unwrap()
        == BlockState::Active));
    assert_eq!(p.status(&b).unwrap(), BlockState::Queued);
    assert_eq!(settle(&p, &a), BlockState::Done);
    assert!(wait_until(Duration::from_secs(2), || p.status(&b).unwrap()
        == BlockState::Active));
    assert_eq!(settle(&p, &b), BlockState::Done);
}

fn sim_htex(dir: &std::path::Path, label: &str, nodes: usize) -> Arc<HtexExecutor> {
    let provider = SimLrmProvider::new(
        format!("{label}-sim"),
        SimLrmConfig {
            nodes_per_block: nodes,
            launcher: LauncherSpec::PerNode(1),
            ..SimLrmConfig::default()
        },
    );
    Arc::new(HtexExecutor::new(
        htex_config(label, dir, 1, 1),
        Arc::new(provider),
    ))
}

#[test]
fn per_node_launch_exports_node_indices() {
    let dir = tempfile::tempdir().unwrap();
    let exec = sim_htex(dir.path(), "multi", 2);
    let dfk = engine(vec![exec.clone()], EngineConfig::default());
    assert!(exec.wait_for_managers(2, Duration::from_secs(10)));
    let futures: Vec<_> = (0..20)
        .map(|_| dfk.call("env", vec![Value::str(ENV_NODE_INDEX)]).unwrap())
        .collect();
    let seen: BTreeSet<String> = futures
        .iter()
        .map(|f| f.result().unwrap().to_string())
        .collect();
    assert_eq!(seen, BTreeSet::from(["0".to_string(), "1".to_string()]));
    let blocks: BTreeSet<String> = exec
        .connected_managers()
        .into_iter()
        .map(|(_, b)| b)
        .collect();
    assert_eq!(blocks, BTreeSet::from(["multi-0".to_string()]));
}

#[test]
fn sim_without_delay_matches_local() {
    let dir = tempfile::tempdir().unwrap();
    let run = |exec: Arc<dyn pilotflow_core::Executor>| {
        let dfk = engine(vec![exec], EngineConfig::default());
        let out: Vec<Value> = (0..30)
            .map(|i| {
                dfk.call("mix", vec![Value::Int(i), Value::Int(11)])
                    .unwrap()
            })
            .collect::<Vec<_>>()
            .iter()
            .map(|f| f.result().unwrap())
            .collect();
        dfk.shutdown();
        out
    };
    let sim = run(sim_htex(dir.path(), "sim", 1));
    let local = run(htex_local(htex_config("loc", dir.path(), 2, 1)));
    assert_eq!(sim, local);
}
