mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use common::*;
use pilotflow_core::monitor::{compute_utilization, replay_histories, EventKind};
use pilotflow_core::provider::BlockState;
use pilotflow_core::{Call, DataFlowKernel, EngineConfig, Executor, TaskError, TaskState, Value};

fn sleep_call(dfk: &DataFlowKernel, ms: i64) -> Call {
    Call::new(dfk.app("sleep").unwrap()).arg(ms)
}

#[test]
fn runs_tasks_through_managers() {
    let dir = tempfile::tempdir().unwrap();
    let exec = htex_local(htex_config("htex", dir.path(), 2, 1));
    let (sink, monitor) = memory_monitor();
    let dfk = DataFlowKernel::start(
        EngineConfig::default(),
        vec![exec.clone() as Arc<dyn Executor>],
        monitor,
    )
    .unwrap();
    let futures: Vec<_> = (0..20)
        .map(|i| dfk.call("add", vec![Value::Int(i), Value::Int(1)]).unwrap())
        .collect();
    for (i, f) in futures.iter().enumerate() {
        assert_eq!(f.result().unwrap(), Value::Int(i as i64 + 1));
    }
    let managers = exec.connected_managers();
    assert_eq!(managers.len(), 1);
    assert_eq!(managers[0].1, "htex-0");
    let locations: Vec<_> = dfk.tasks().into_iter().filter_map(|t| t.location).collect();
    assert!(locations.iter().all(|l| l.starts_with(&managers[0].0)));
    dfk.shutdown();

    let events = sink.events();
    let histories = replay_histories(&events).unwrap();
    assert_eq!(histories.len(), 20);
    assert!(histories
        .values()
        .all(|h| h.last() == Some(&TaskState::Succeeded)));
    assert!(events
        .iter()
        .any(|e| matches!(&e.kind, EventKind::Manager { event, .. } if event == "registered")));
    assert!(events
        .iter()
        .any(|e| matches!(&e.kind, EventKind::Block { state, .. } if state == "active")));
    let u = compute_utilization(&events).unwrap();
    assert!(u.utilization > 0.0 && u.utilization <= 100.0);
}

#[test]
fn capacity_one_managers_each_take_one_task() {
    let dir = tempfile::tempdir().unwrap();
    let exec = htex_local(htex_config("cap", dir.path(), 1, 2));
    let dfk = engine(vec![exec.clone()], EngineConfig::default());
    assert!(exec.wait_for_managers(2, Duration::from_secs(20)));
    let futures: Vec<_> = (0..3)
        .map(|_| dfk.submit(sleep_call(&dfk, 600)).unwrap())
        .collect();
    assert!(wait_until(Duration::from_secs(5), || {
        exec.outstanding().unwrap().values().sum::<usize>() == 2
    }));
    let outstanding = exec.outstanding().unwrap();
    assert_eq!(outstanding.len(), 2);
    assert!(outstanding.values().all(|n| *n == 1), "{outstanding:?}");
    for f in futures {
        assert!(f.result().is_ok());
    }
}

#[test]
fn blacklisted_manager_gets_no_new_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = htex_config("bl", dir.path(), 1, 2);
    let log = dir.path().join("dispatch.log");
    cfg.dispatch_log = Some(log.clone());
    let exec = htex_local(cfg);
    let dfk = engine(vec![exec.clone()], EngineConfig::default());
    assert!(exec.wait_for_managers(2, Duration::from_secs(20)));
    let banned = exec.connected_managers()[0].0.clone();
    assert_eq!(exec.blacklist(&banned).unwrap(), 0);
    assert!(matches!(
        exec.blacklist("nobody"),
        Err(pilotflow_core::executor::ExecutorError::UnknownManager(_))
    ));
    let futures: Vec<_> = (0..10)
        .map(|i| dfk.call("identity", vec![Value::Int(i)]).unwrap())
        .collect();
    for f in futures {
        f.result().unwrap();
    }
    let text = std::fs::read_to_string(&log).unwrap();
    let targets: Vec<&str> = text
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap())
        .collect();
    assert_eq!(targets.len(), 10);
    assert!(targets.iter().all(|m| *m != banned));
}

#[test]
fn killed_manager_loses_its_tasks_and_they_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = htex_config("loss", dir.path(), 1, 2);
    cfg.prefetch_capacity = 4;
    let exec = htex_local(cfg);
    let config = EngineConfig {
        retries: 1,
        ..EngineConfig::default()
    };
    let (sink, monitor) = memory_monitor();
    let dfk =
        DataFlowKernel::start(config, vec![exec.clone() as Arc<dyn Executor>], monitor).unwrap();
    assert!(exec.wait_for_managers(2, Duration::from_secs(20)));
    let futures: Vec<_> = (0..10)
        .map(|_| dfk.submit(sleep_call(&dfk, 300)).unwrap())
        .collect();
    assert!(wait_until(Duration::from_secs(5), || {
        exec.outstanding().unwrap().values().all(|n| *n == 5)
    }));
    let (victim, pid) = exec.manager_pids().into_iter().next().unwrap();
    unsafe {
        libc::kill(pid as i32, libc::SIGKILL);
    }
    for f in &futures {
        assert!(f.result().is_ok(), "{:?}", f.result());
    }
    let retried = dfk.tasks().iter().filter(|t| t.launches == 2).count();
    assert!(retried >= 4, "only {retried} tasks were relaunched");
    assert!(!exec.connected_managers().iter().any(|(m, _)| *m == victim));
    let lost = sink
        .events()
        .into_iter()
        .any(|e| matches!(&e.kind, EventKind::Manager { event, manager, .. } if event == "lost" && *manager == victim));
    assert!(lost);
}

#[test]
fn manager_loss_without_retries_reports_manager_lost() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = htex_config("loss0", dir.path(), 1, 1);
    cfg.prefetch_capacity = 4;
    let exec = htex_local(cfg);
    let dfk = engine(vec![exec.clone()], EngineConfig::default());
    assert!(exec.wait_for_managers(1, Duration::from_secs(20)));
    let futures: Vec<_> = (0..5)
        .map(|_| dfk.submit(sleep_call(&dfk, 2000)).unwrap())
        .collect();
    assert!(wait_until(Duration::from_secs(5), || {
        exec.outstanding().unwrap().values().sum::<usize>() == 5
    }));
    let pid = *exec.manager_pids().values().next().unwrap();
    unsafe {
        libc::kill(pid as i32, libc::SIGKILL);
    }
    for f in futures {
        assert!(
            matches!(f.result(), Err(TaskError::ManagerLost { .. })),
            "{:?}",
            f.result()
        );
    }
}

#[test]
fn managers_exit_when_the_interchange_dies() {
    let dir = tempfile::tempdir().unwrap();
    let exec = htex_local(htex_config("ixkill", dir.path(), 1, 1));
    let dfk = engine(vec![exec.clone()], EngineConfig::default());
    assert!(exec.wait_for_managers(1, Duration::from_secs(20)));
    let pending = dfk.submit(sleep_call(&dfk, 5000)).unwrap();
    std::thread::sleep(Duration::from_millis(200));
    let pid = exec.interchange_pid().unwrap();
    unsafe {
        libc::kill(pid as i32, libc::SIGKILL);
    }
    // Heartbeat threshold plus one period, with slack for process teardown.
    assert!(wait_until(Duration::from_millis(800 + 200 + 1000), || {
        exec.block_states().values().all(|s| s.is_terminal())
    }));
    assert!(matches!(
        pending.result(),
        Err(TaskError::ManagerLost { .. })
    ));
    assert!(dfk.call("noop", vec![]).unwrap().result().is_err());
}

#[test]
fn results_are_batched_and_delivered_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = htex_config("audit", dir.path(), 2, 1);
    cfg.audit_results = true;
    cfg.prefetch_capacity = 8;
    let exec = htex_local(cfg);
    let dfk = engine(vec![exec.clone()], EngineConfig::default());
    assert!(exec.wait_for_managers(1, Duration::from_secs(20)));
    let futures: Vec<_> = (0..100)
        .map(|_| dfk.call("noop", vec![]).unwrap())
        .collect();
    for f in &futures {
        f.result().unwrap();
    }
    let stats = exec.frame_stats();
    assert!((1..=100).contains(&stats.result_batches), "{stats:?}");
    assert_eq!(stats.results_received, 100);
    let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
    for id in exec.result_audit() {
        *seen.entry(id.0).or_default() += 1;
    }
    let expected: Vec<u64> = futures.iter().map(|f| f.task_id().0).collect();
    assert_eq!(seen.keys().copied().collect::<Vec<_>>(), expected);
    assert!(seen.values().all(|n| *n == 1));
}

#[test]
fn scale_in_drains_and_cancels_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let exec = htex_local(htex_config("scale", dir.path(), 1, 0));
    let _dfk = engine(vec![exec.clone()], EngineConfig::default());
    let ids = exec.scale_out(2).unwrap();
    assert_eq!(ids, ["scale-0", "scale-1"]);
    assert!(exec.wait_for_managers(2, Duration::from_secs(20)));
    let snap = exec.load_snapshot().unwrap();
    assert_eq!(snap.active_blocks, 2);
    assert_eq!(snap.slots_per_block, 1);
    exec.scale_in(&ids[..1]).unwrap();
    assert!(wait_until(Duration::from_secs(5), || {
        exec.block_states()["scale-0"] == BlockState::Done
    }));
    let snap = exec.load_snapshot().unwrap();
    assert_eq!(snap.active_blocks, 1);
    assert!(exec.scale_in(&["nope".to_string()]).is_err());
}

#[test]
fn registrations_before_the_client_connects_are_forwarded() {
    use std::io::{BufRead, BufReader};
    use std::net::TcpStream;
    use std::process::{Command, Stdio};

    use pilotflow_core::wire::{read_message, write_message, Message, MsgType};

    let agent = agent();
    let mut child = Command::new(&agent.program)
        .args(&agent.args)
        .args([
            "htex-interchange",
            "--heartbeat-period-ms",
            "5000",
            "--heartbeat-threshold-ms",
            "60000",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let port: u16 = line.split_whitespace().nth(1).unwrap().parse().unwrap();

    let mut manager = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let hello = Message::new(MsgType::Register)
        .with("role", "manager")
        .with("manager", "early")
        .with("workers", 1i64)
        .with("capacity", 1i64);
    write_message(&mut manager, &hello).unwrap();
    std::thread::sleep(Duration::from_millis(200));

    let mut client = TcpStream::connect(("127.0.0.1", port)).unwrap();
    write_message(
        &mut client,
        &Message::new(MsgType::Register).with("role", "client"),
    )
    .unwrap();
    client
        .set_read_timeout(Some(Duration::from_secs(5)))
        .unwrap();
    let mut r = BufReader::new(client);
    let seen = loop {
        match read_message(&mut r) {
            Ok(m) if m.kind == MsgType::Register => break m.str("manager").map(str::to_string),
            Ok(_) => continue,
            Err(_) => break None,
        }
    };
    let _ = child.kill();
    let _ = child.wait();
    assert_eq!(seen.as_deref(), Some("early"));
}
