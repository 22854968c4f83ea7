mod common;

use std::sync::Arc;
use std::time::Duration;

use common::dag::*;
use common::*;
use pilotflow_core::app::Registry;
use pilotflow_core::executor::{ExecutionKernel, InlineExecutor, LocalExecutor};
use pilotflow_core::monitor::replay_histories;
use pilotflow_core::{
    AppSpec, Call, DataFlowKernel, EngineConfig, Executor, SubmitError, TaskError, TaskState, Value,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn local(label: &str, workers: usize, dir: &std::path::Path) -> Arc<dyn Executor> {
    let kernel = ExecutionKernel::new(Arc::new(Registry::with_builtins()), dir.join(label));
    Arc::new(LocalExecutor::new(label, workers, kernel))
}

fn inline(label: &str, dir: &std::path::Path) -> Arc<dyn Executor> {
    let kernel = ExecutionKernel::new(Arc::new(Registry::with_builtins()), dir.join(label));
    Arc::new(InlineExecutor::new(label, kernel))
}

#[test]
fn random_graphs_match_the_serial_reference() {
    let dir = tempfile::tempdir().unwrap();
    let registry = Registry::with_builtins();
    for seed in 0..40 {
        let dag = random_dag(seed, 120, 5);
        let expected = serial_reference(&dag, &registry);
        let dfk = engine(vec![local("pool", 4, dir.path())], EngineConfig::default());
        let handles = submit_dag(&dfk, &dag);
        dfk.wait_all();
        check_outcomes(&handles, &expected).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        check_edge_order(&dfk.tasks()).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn dependency_failure_names_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let dfk = engine(vec![local("pool", 2, dir.path())], EngineConfig::default());
    let bad = dfk.call("fail", vec![Value::str("boom")]).unwrap();
    let mid = dfk.call("identity", vec![bad.as_arg()]).unwrap();
    let leaf = dfk.call("add", vec![mid.as_arg(), Value::Int(1)]).unwrap();
    match leaf.result() {
        Err(TaskError::Dependency {
            root,
            dependency,
            cause,
        }) => {
            assert_eq!(root, bad.task_id());
            assert_eq!(dependency, mid.task_id());
            assert!(cause.contains("boom"));
        }
        other => panic!("{other:?}"),
    }
    let summary = dfk.wait_all();
    assert_eq!((summary.succeeded, summary.failed), (0, 3));
    // Dependents never reached an executor.
    assert_eq!(dfk.total_submissions(), 1);
}

#[test]
fn retries_rerun_failed_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let counter = dir.path().join("count");
    let dfk = engine(vec![local("pool", 1, dir.path())], EngineConfig::default());
    let args = [Value::str(counter.to_string_lossy()), Value::Int(2)];
    let call = Call::new(dfk.app("flaky").unwrap()).args(args.clone());
    assert!(dfk
        .submit(call.clone().retries(1))
        .unwrap()
        .result()
        .is_err());
    std::fs::remove_file(&counter).unwrap();
    assert_eq!(
        dfk.submit(call.retries(2)).unwrap().result(),
        Ok(Value::Int(3))
    );
    let launches: Vec<u32> = dfk.tasks().iter().map(|t| t.launches).collect();
    assert_eq!(launches, [2, 3]);
}

#[test]
fn memoized_calls_run_once() {
    let dir = tempfile::tempdir().unwrap();
    let dfk = engine(vec![local("pool", 1, dir.path())], EngineConfig::default());
    let add = dfk.app("add").unwrap();
    let first = dfk
        .submit(Call::new(add.clone()).arg(2i64).arg(3i64).memoize(true))
        .unwrap();
    assert_eq!(first.result(), Ok(Value::Int(5)));
    let again = dfk
        .submit(Call::new(add.clone()).arg(2i64).arg(3i64).memoize(true))
        .unwrap();
    assert_eq!(again.result(), Ok(Value::Int(5)));
    let other = dfk
        .submit(Call::new(add).arg(3i64).arg(2i64).memoize(true))
        .unwrap();
    assert_eq!(other.result(), Ok(Value::Int(5)));
    let summary = dfk.wait_all();
    assert_eq!(summary.memo_hits, 1);
    assert_eq!(dfk.total_submissions(), 2);
    assert_eq!(dfk.tasks()[1].state, TaskState::MemoHit);
}

#[test]
fn checkpoint_rerun_submits_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("run.ckpt");
    let run = |config: EngineConfig| {
        let dfk = engine(vec![local("pool", 2, dir.path())], config);
        let futures: Vec<_> = (0..30)
            .map(|i| {
                dfk.submit(Call::new(dfk.app("mix").unwrap()).arg(i as i64).arg(7i64))
                    .unwrap()
            })
            .collect();
        let results: Vec<Value> = futures.iter().map(|f| f.result().unwrap()).collect();
        let submissions = dfk.total_submissions();
        dfk.shutdown();
        (results, submissions)
    };
    let (first, n1) = run(EngineConfig {
        memoize: true,
        checkpoint_path: Some(ckpt.clone()),
        ..EngineConfig::default()
    });
    assert_eq!(n1, 30);
    let (second, n2) = run(EngineConfig {
        memoize: true,
        checkpoint_files: vec![ckpt],
        ..EngineConfig::default()
    });
    assert_eq!(n2, 0);
    assert_eq!(first, second);
}

#[test]
fn hintless_dispatch_is_uniform_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let counts = |seed: u64| {
        let config = EngineConfig {
            seed,
            ..EngineConfig::default()
        };
        let dfk = engine(
            vec![inline("a", dir.path()), inline("b", dir.path())],
            config,
        );
        for _ in 0..2000 {
            dfk.call("noop", vec![]).unwrap();
        }
        dfk.wait_all();
        let assignment: Vec<Option<String>> = dfk.tasks().into_iter().map(|t| t.executor).collect();
        (dfk.submissions(), assignment)
    };
    let (subs, assignment) = counts(42);
    let observed: Vec<f64> = subs.values().map(|n| *n as f64).collect();
    let expected = 1000.0;
    let stat: f64 = observed
        .iter()
        .map(|o| (o - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square p = {p}, counts {subs:?}");
    assert_eq!(counts(42).1, assignment);
    assert_ne!(counts(43).1, assignment);
}

#[test]
fn hints_pin_tasks_and_unknown_labels_fail() {
    let dir = tempfile::tempdir().unwrap();
    let dfk = engine(
        vec![inline("a", dir.path()), inline("b", dir.path())],
        EngineConfig::default(),
    );
    let noop = dfk.app("noop").unwrap();
    for _ in 0..10 {
        dfk.submit(Call::new(noop.clone()).on("b")).unwrap();
    }
    let lost = dfk.submit(Call::new(noop).on("c")).unwrap();
    assert!(matches!(lost.result(), Err(TaskError::UnknownExecutor(l)) if l == "c"));
    dfk.wait_all();
    assert_eq!(dfk.submissions()["b"], 10);
    assert_eq!(dfk.submissions()["a"], 0);
}

#[test]
fn submit_rejects_bad_calls() {
    let dir = tempfile::tempdir().unwrap();
    let dfk = engine(vec![inline("a", dir.path())], EngineConfig::default());
    assert_eq!(
        dfk.call("nope", vec![]).unwrap_err(),
        SubmitError::UnknownApp("nope".into())
    );
    let out = dir.path().join("x.txt");
    let touch = AppSpec::shell("touch", "touch {outputs}");
    dfk.submit(Call::new(touch.clone()).output(&out)).unwrap();
    assert!(matches!(
        dfk.submit(Call::new(touch).output(&out)),
        Err(SubmitError::DuplicateOutput(_))
    ));
    dfk.shutdown();
    assert_eq!(
        dfk.call("noop", vec![]).unwrap_err(),
        SubmitError::EngineShutdown
    );
}

#[test]
fn declared_outputs_feed_downstream_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let dfk = engine(vec![local("pool", 2, dir.path())], EngineConfig::default());
    let out = dir.path().join("out.txt");
    let writer = AppSpec::shell("write", "echo {0} > {outputs}");
    let produced = dfk
        .submit(Call::new(writer).arg("hello-from-shell").output(&out))
        .unwrap();
    let file = &produced.outputs()[0];
    let read = dfk.call("cat", vec![file.as_arg()]).unwrap();
    assert_eq!(read.result(), Ok(Value::str("hello-from-shell\n")));
    assert_eq!(produced.result(), Ok(Value::Status(0)));

    let missing = dir.path().join("never.txt");
    let liar = AppSpec::shell("liar", "true");
    let f = dfk.submit(Call::new(liar).output(&missing)).unwrap();
    assert!(matches!(
        f.outputs()[0].result(),
        Err(TaskError::OutputMissing { .. })
    ));
    let crash = AppSpec::shell("crash", "exit 3");
    let f = dfk
        .submit(Call::new(crash).output(dir.path().join("c.txt")))
        .unwrap();
    assert!(matches!(
        f.result(),
        Err(TaskError::ShellExit { status: 3, .. })
    ));
    assert!(f.outputs()[0].result().is_err());
}

#[test]
fn timeouts_fail_slow_attempts() {
    let dir = tempfile::tempdir().unwrap();
    let config = EngineConfig {
        task_timeout: Some(Duration::from_millis(100)),
        ..EngineConfig::default()
    };
    let dfk = engine(vec![local("pool", 2, dir.path())], config);
    let slow = dfk.call("sleep", vec![Value::Int(1000)]).unwrap();
    let fast = dfk.call("sleep", vec![Value::Int(1)]).unwrap();
    assert_eq!(slow.result(), Err(TaskError::Timeout));
    assert!(fast.result().is_ok());
}

#[test]
fn monitor_log_replays_to_legal_histories() {
    let dir = tempfile::tempdir().unwrap();
    let (sink, monitor) = memory_monitor();
    let dfk = DataFlowKernel::start(
        EngineConfig::default(),
        vec![local("pool", 3, dir.path())],
        monitor,
    )
    .unwrap();
    let a = dfk.call("add", vec![Value::Int(1), Value::Int(2)]).unwrap();
    let b = dfk.call("fail", vec![]).unwrap();
    dfk.call("add", vec![a.as_arg(), b.as_arg()]).unwrap();
    let summary = dfk.wait_all();
    dfk.shutdown();
    let histories = replay_histories(&sink.events()).unwrap();
    assert_eq!(histories.len() as u64, summary.total());
    assert_eq!(
        histories[&a.task_id()],
        [
            TaskState::Pending,
            TaskState::Launchable,
            TaskState::Launched,
            TaskState::Running,
            TaskState::Succeeded
        ]
    );
}
