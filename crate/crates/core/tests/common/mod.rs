#![allow(dead_code)]

pub mod dag;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use pilotflow_core::agent::AgentCommand;
use pilotflow_core::clock::RunClock;
use pilotflow_core::htex::{HtexConfig, HtexExecutor};
use pilotflow_core::llex::{LlexConfig, LlexExecutor};
use pilotflow_core::monitor::{MemorySink, Monitor};
use pilotflow_core::provider::{LocalProvider, Provider};
use pilotflow_core::{DataFlowKernel, EngineConfig, Executor};

pub fn agent() -> AgentCommand {
    AgentCommand::new(env!("CARGO_BIN_EXE_pilotflow-agent"))
}

/// Pilot-job executor on local blocks with fast heartbeats.
pub fn htex_config(label: &str, dir: &Path, workers: usize, blocks: usize) -> HtexConfig {
    let mut c = HtexConfig::new(label, agent());
    c.workers_per_node = workers;
    c.init_blocks = blocks;
    c.heartbeat_period = Duration::from_millis(200);
    c.heartbeat_threshold = Duration::from_millis(800);
    c.sandbox_root = dir.join("sandbox");
    c
}

pub fn htex_local(config: HtexConfig) -> Arc<HtexExecutor> {
    let provider: Arc<dyn Provider> =
        Arc::new(LocalProvider::new(format!("{}-local", config.label)));
    Arc::new(HtexExecutor::new(config, provider))
}

pub fn llex_config(label: &str, dir: &Path, workers: usize) -> LlexConfig {
    let mut c = LlexConfig::new(label, agent());
    c.workers = workers;
    c.sandbox_root = dir.join("sandbox");
    c
}

pub fn llex(config: LlexConfig) -> Arc<LlexExecutor> {
    Arc::new(LlexExecutor::new(config))
}

pub fn memory_monitor() -> (Arc<MemorySink>, Monitor) {
    let sink = Arc::new(MemorySink::new());
    let monitor = Monitor::new(sink.clone(), RunClock::new());
    (sink, monitor)
}

pub fn engine(executors: Vec<Arc<dyn Executor>>, config: EngineConfig) -> DataFlowKernel {
    DataFlowKernel::start(config, executors, Monitor::disabled()).expect("engine starts")
}

pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    cond()
}
