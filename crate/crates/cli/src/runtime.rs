//! Builds executors, providers, the monitor and the scaling loop from a
//! [`RunConfig`] and starts the engine.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use pilotflow_core::agent::AgentCommand;
use pilotflow_core::app::Registry;
use pilotflow_core::clock::RunClock;
use pilotflow_core::elasticity::{ScalingLog, StrategyLoop};
use pilotflow_core::executor::{ExecutionKernel, LocalExecutor};
use pilotflow_core::htex::{HtexConfig, HtexExecutor};
use pilotflow_core::llex::{LlexConfig, LlexExecutor};
use pilotflow_core::monitor::{FileSink, LogHeader, Monitor, MonitorSink, LOG_VERSION};
use pilotflow_core::provider::{
    LauncherSpec, LocalProvider, Provider, QueueDelay, SimLrmConfig, SimLrmProvider,
};
use pilotflow_core::{DataFlowKernel, EngineConfig, EngineError, Executor};
use thiserror::Error;

use crate::config::{
    parse_walltime, ConfigError, ExecutorConfig, ExecutorKind, ProviderKind, RunConfig,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot open monitor log {path}: {source}")]
    MonitorLog {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no pilotflow-agent found; set PILOTFLOW_AGENT")]
    NoAgent,
    #[error(transparent)]
    Submit(#[from] pilotflow_core::SubmitError),
    #[error(transparent)]
    Utilization(#[from] pilotflow_core::monitor::UtilizationError),
}

/// Where helper processes come from and where files go.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub agent: AgentCommand,
    pub work_dir: PathBuf,
    /// Overrides the config's monitor log.
    pub monitor_log: Option<PathBuf>,
    /// Overrides the config's seed.
    pub seed: Option<u64>,
}

impl RunOptions {
    pub fn new(agent: AgentCommand, work_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            agent,
            work_dir: work_dir.into(),
            monitor_log: None,
            seed: None,
        }
    }
}

/// The agent command for this process: `$PILOTFLOW_AGENT` or a sibling
/// `pilotflow-agent`, else this executable's hidden `agent` subcommand.
pub fn default_agent() -> Result<AgentCommand, RunError> {
    if let Some(a) = AgentCommand::locate() {
        return Ok(a);
    }
    let exe = std::env::current_exe().map_err(|_| RunError::NoAgent)?;
    Ok(AgentCommand::new(exe).with_args(&["agent"]))
}

pub fn run_id() -> String {
    format!(
        "run-{}-{}",
        pilotflow_core::clock::epoch_us(),
        std::process::id()
    )
}

pub struct Runtime {
    pub dfk: DataFlowKernel,
    pub htex: Vec<Arc<HtexExecutor>>,
    pub llex: Vec<Arc<LlexExecutor>>,
    /// Managers each htex executor should see once its initial blocks run.
    expected_managers: Vec<usize>,
    strategy: Option<StrategyLoop>,
}

/// Agents one block starts.
fn managers_per_block(p: &crate::config::ProviderConfig) -> usize {
    let per_node = match LauncherSpec::parse(&p.launcher) {
        Some(LauncherSpec::PerNode(n)) => n,
        _ if p.kind == ProviderKind::Sim => 1,
        _ => return 1,
    };
    per_node * p.nodes_per_block.max(1)
}

fn provider_for(exec: &ExecutorConfig, seed: u64) -> Arc<dyn Provider> {
    let p = exec.provider_or_default();
    let launcher = LauncherSpec::parse(&p.launcher).unwrap_or(LauncherSpec::Single);
    let name = format!(
        "{}-{}",
        exec.label,
        if p.kind == ProviderKind::Sim {
            "sim"
        } else {
            "local"
        }
    );
    match p.kind {
        ProviderKind::Local => Arc::new(
            LocalProvider::new(name)
                .with_nodes(p.nodes_per_block)
                .with_launcher(launcher),
        ),
        ProviderKind::Sim => Arc::new(SimLrmProvider::new(
            name,
            SimLrmConfig {
                queue_delay: QueueDelay::Fixed(Duration::from_secs_f64(p.queue_delay)),
                max_active_blocks: p.max_active_blocks.unwrap_or(usize::MAX),
                failure_rate: p.failure_rate,
                walltime: p.walltime.as_deref().and_then(parse_walltime),
                nodes_per_block: p.nodes_per_block,
                launcher,
                partition: p.partition.clone().unwrap_or_else(|| "sim".into()),
                seed,
            },
        )),
    }
}

impl Runtime {
    pub fn start(cfg: &RunConfig, opts: &RunOptions) -> Result<Runtime, RunError> {
        Self::start_with_monitor(cfg, opts, None)
    }

    /// Like [`start`](Self::start) but emitting into `sink` when given.
    pub fn start_with_monitor(
        cfg: &RunConfig,
        opts: &RunOptions,
        sink: Option<Arc<dyn MonitorSink>>,
    ) -> Result<Runtime, RunError> {
        cfg.validate()?;
        let seed = opts.seed.unwrap_or(cfg.seed);
        let sandbox = cfg
            .sandbox
            .clone()
            .unwrap_or_else(|| opts.work_dir.join("sandbox"));
        let registry = Arc::new(Registry::with_builtins());
        let clock = RunClock::new();
        let sink = match (sink, opts.monitor_log.as_ref().or(cfg.monitor_log.as_ref())) {
            (Some(s), _) => Some(s),
            (None, Some(path)) => {
                let header = LogHeader {
                    version: LOG_VERSION,
                    run_id: run_id(),
                    seed,
                };
                let s = FileSink::create(path, &header).map_err(|source| RunError::MonitorLog {
                    path: path.clone(),
                    source,
                })?;
                Some(Arc::new(s) as Arc<dyn MonitorSink>)
            }
            (None, None) => None,
        };
        let monitor = sink.map_or_else(Monitor::disabled, |s| Monitor::new(s, clock));

        let mut executors: Vec<Arc<dyn Executor>> = Vec::new();
        let mut htex = Vec::new();
        let mut llex = Vec::new();
        let mut scaled = Vec::new();
        let mut expected_managers = Vec::new();
        for e in &cfg.executors {
            let root = sandbox.join(&e.label);
            match e.kind {
                ExecutorKind::Local => {
                    let kernel = ExecutionKernel::new(registry.clone(), root);
                    executors.push(Arc::new(LocalExecutor::new(
                        &e.label,
                        e.workers.unwrap_or(1),
                        kernel,
                    )));
                }
                ExecutorKind::Htex => {
                    let mut h = HtexConfig::new(&e.label, opts.agent.clone());
                    h.workers_per_node = e.workers_per_node.unwrap_or(1);
                    h.prefetch_capacity = e.prefetch_capacity.unwrap_or(0);
                    if let Some(s) = e.heartbeat_period {
                        h.heartbeat_period = Duration::from_secs_f64(s);
                    }
                    if let Some(s) = e.heartbeat_threshold {
                        h.heartbeat_threshold = Duration::from_secs_f64(s);
                    }
                    if let Some(b) = e.batch_size_max {
                        h.batch_size_max = b;
                    }
                    h.init_blocks = e.provider_or_default().init_blocks;
                    h.sandbox_root = root;
                    h.seed = seed;
                    let exec = Arc::new(HtexExecutor::new(h, provider_for(e, seed)));
                    if cfg.strategy.enabled {
                        scaled.push((exec.clone() as Arc<dyn Executor>, cfg.strategy_for(e)));
                    }
                    let p = e.provider_or_default();
                    expected_managers.push(p.init_blocks * managers_per_block(&p));
                    htex.push(exec.clone());
                    executors.push(exec);
                }
                ExecutorKind::Llex => {
                    let mut l = LlexConfig::new(&e.label, opts.agent.clone());
                    l.workers = e.workers.unwrap_or(1);
                    l.replication_factor = e.replication_factor.unwrap_or(1);
                    l.timeout = e.timeout.map(Duration::from_secs_f64);
                    l.retries = e.resends.unwrap_or(0);
                    l.sandbox_root = root;
                    let exec = Arc::new(LlexExecutor::new(l));
                    llex.push(exec.clone());
                    executors.push(exec);
                }
            }
        }

        let engine = EngineConfig {
            seed,
            retries: cfg.retries,
            memoize: cfg.checkpointing.enabled,
            checkpoint_files: cfg.checkpointing.files.clone(),
            checkpoint_path: if cfg.checkpointing.enabled {
                cfg.checkpointing.path.clone()
            } else {
                None
            },
            task_timeout: cfg.task_timeout.map(Duration::from_secs_f64),
            staging_dir: sandbox.join("staging"),
            registry,
        };
        let dfk = DataFlowKernel::start(engine, executors, monitor)?;
        let strategy = (!scaled.is_empty()).then(|| {
            StrategyLoop::start(
                scaled,
                Duration::from_secs_f64(cfg.strategy.poll_period),
                clock,
            )
        });
        Ok(Runtime {
            dfk,
            htex,
            llex,
            expected_managers,
            strategy,
        })
    }

    /// Waits until the managers of every initial htex block have
    /// registered.
    pub fn wait_for_workers(&self, timeout: Duration) -> bool {
        self.htex
            .iter()
            .zip(&self.expected_managers)
            .all(|(h, n)| h.wait_for_managers(*n, timeout))
    }

    /// Stops scaling, then the engine. Returns the scaling log if a strategy
    /// loop ran.
    pub fn shutdown(mut self) -> Option<ScalingLog> {
        let log = self.strategy.take().map(StrategyLoop::stop);
        self.dfk.shutdown();
        log
    }
}

/// Working directory for a run: the config's sandbox parent or a fresh
/// directory under the system temp dir.
pub fn work_dir(base: Option<&Path>) -> PathBuf {
    match base {
        Some(p) => p.to_path_buf(),
        None => std::env::temp_dir().join(format!("pilotflow-{}", run_id())),
    }
}
