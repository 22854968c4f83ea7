//! Entry points for the helper processes: interchange, manager and worker
//! for the pilot-job executor, relay and worker for the low-latency one.
//!
//! They are reached through the `pilotflow-agent` binary or the hidden
//! `pilotflow agent` subcommand. Agents only know the built-in apps.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use crate::app::Registry;
use crate::executor::ExecutionKernel;
use crate::provider::{LaunchCommand, ENV_BLOCK_ID};

/// How to start an agent process: a program plus the arguments that come
/// before the agent subcommand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl AgentCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        AgentCommand {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn with_args(mut self, args: &[&str]) -> Self {
        self.args.extend(args.iter().map(|s| s.to_string()));
        self
    }

    /// Finds `pilotflow-agent`: `$PILOTFLOW_AGENT` if set, else next to the
    /// running executable or one directory up (test binaries live in
    /// `deps/`).
    pub fn locate() -> Option<AgentCommand> {
        if let Some(p) = std::env::var_os("PILOTFLOW_AGENT") {
            return Some(AgentCommand::new(p));
        }
        let exe = std::env::current_exe().ok()?;
        let dir = exe.parent()?;
        [
            dir.join("pilotflow-agent"),
            dir.parent()?.join("pilotflow-agent"),
        ]
        .into_iter()
        .find(|p| p.is_file())
        .map(AgentCommand::new)
    }

    pub fn command(&self, subcommand: &str) -> LaunchCommand {
        let mut cmd = LaunchCommand::new(&self.program);
        for a in &self.args {
            cmd = cmd.arg(a.as_str());
        }
        cmd.arg(subcommand)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pilotflow-agent", about = "pilotflow helper processes")]
pub struct AgentCli {
    #[command(subcommand)]
    pub command: AgentSubcommand,
}

#[derive(Debug, Subcommand)]
pub enum AgentSubcommand {
    /// Task broker between an executor client and its managers.
    HtexInterchange {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 2000)]
        heartbeat_period_ms: u64,
        #[arg(long, default_value_t = 6000)]
        heartbeat_threshold_ms: u64,
        #[arg(long, default_value_t = 128)]
        batch_size_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dispatch_log: Option<PathBuf>,
    },
    /// Per-node manager with a pool of workers.
    HtexManager {
        #[arg(long)]
        addr: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        prefetch: usize,
        #[arg(long, default_value_t = 2000)]
        heartbeat_period_ms: u64,
        #[arg(long, default_value_t = 6000)]
        heartbeat_threshold_ms: u64,
        #[arg(long)]
        sandbox: PathBuf,
        /// Defaults to $PILOTFLOW_BLOCK_ID.
        #[arg(long)]
        block_id: Option<String>,
    },
    /// Single worker fed over stdin/stdout by a manager.
    HtexWorker {
        #[arg(long)]
        sandbox: PathBuf,
        #[arg(long)]
        worker_id: String,
    },
    /// Stateless relay for the low-latency executor.
    LlexRelay {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Low-latency worker.
    LlexWorker {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        worker_id: String,
        #[arg(long)]
        sandbox: PathBuf,
        /// Swallow tasks without answering.
        #[arg(long = "drop")]
        drop_tasks: bool,
    },
}

fn kernel(sandbox: PathBuf) -> ExecutionKernel {
    ExecutionKernel::new(Arc::new(Registry::with_builtins()), sandbox)
}

pub fn init_tracing() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("PILOTFLOW_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(false)
        // A closed stderr must not panic the thread that logged.
        .log_internal_errors(false)
        .try_init();
}

/// Runs the agent named on the command line; returns the exit code.
pub fn run(cli: AgentCli) -> i32 {
    let ms = Duration::from_millis;
    let result = match cli.command {
        AgentSubcommand::HtexInterchange {
            bind,
            heartbeat_period_ms,
            heartbeat_threshold_ms,
            batch_size_max,
            seed,
            dispatch_log,
        } => crate::htex::interchange::run(crate::htex::interchange::InterchangeOptions {
            bind,
            heartbeat_period: ms(heartbeat_period_ms),
            heartbeat_threshold: ms(heartbeat_threshold_ms),
            batch_size_max,
            seed,
            dispatch_log,
        }),
        AgentSubcommand::HtexManager {
            addr,
            workers,
            prefetch,
            heartbeat_period_ms,
            heartbeat_threshold_ms,
            sandbox,
            block_id,
        } => {
            let agent = match std::env::current_exe() {
                Ok(exe) => AgentCommand::new(exe).with_args(&agent_prefix()),
                Err(e) => {
                    tracing::error!("cannot find own executable: {e}");
                    return 1;
                }
            };
            crate::htex::manager::run(crate::htex::manager::ManagerOptions {
                addr,
                workers,
                prefetch,
                heartbeat_period: ms(heartbeat_period_ms),
                heartbeat_threshold: ms(heartbeat_threshold_ms),
                sandbox,
                block_id: block_id
                    .or_else(|| std::env::var(ENV_BLOCK_ID).ok())
                    .unwrap_or_default(),
                agent,
            })
        }
        AgentSubcommand::HtexWorker { sandbox, worker_id } => {
            crate::htex::worker::die_with_parent();
            crate::htex::worker::serve(
                &kernel(sandbox),
                &worker_id,
                std::io::stdin(),
                std::io::stdout(),
            )
        }
        AgentSubcommand::LlexRelay { bind } => {
            crate::llex::relay::run(crate::llex::relay::RelayOptions { bind })
        }
        AgentSubcommand::LlexWorker {
            addr,
            worker_id,
            sandbox,
            drop_tasks,
        } => crate::llex::worker::run(
            crate::llex::worker::LlexWorkerOptions {
                addr,
                worker_id,
                drop_tasks,
            },
            &kernel(sandbox),
        ),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            tracing::error!("agent failed: {e}");
            1
        }
    }
}

/// Arguments that precede the agent subcommand in this process's own
/// command line, so children can be started the same way.
fn agent_prefix() -> Vec<&'static str> {
    let is_agent_bin = std::env::current_exe()
        .ok()
        .and_then(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with("pilotflow-agent"))
        })
        .unwrap_or(false);
    if is_agent_bin {
        Vec::new()
    } else {
        vec!["agent"]
    }
}
