//! Resource providers: acquire, poll and release blocks of nodes.
//!
//! A block is one provider job. Executors ask a provider for blocks and the
//! provider starts the executor's agent command on each node through a
//! [`Channel`], expanded by a [`LauncherSpec`].

mod block;
pub mod channel;
pub mod local;
pub mod sim;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

pub use channel::{Channel, LocalChannel, SshChannel};
pub use local::LocalProvider;
pub use sim::{QueueDelay, SimLrmConfig, SimLrmProvider};

pub const ENV_BLOCK_ID: &str = "PILOTFLOW_BLOCK_ID";
pub const ENV_AGENT_INDEX: &str = "PILOTFLOW_AGENT_INDEX";
pub const ENV_AGENT_COUNT: &str = "PILOTFLOW_AGENT_COUNT";
pub const ENV_NODE_INDEX: &str = "PILOTFLOW_NODE_INDEX";
pub const ENV_NODE_COUNT: &str = "PILOTFLOW_NODE_COUNT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockState {
    Requested,
    Queued,
    Active,
    Terminating,
    Done,
    Failed,
}

impl BlockState {
    /// Legal block transitions. `Queued -> Terminating` covers a cancel
    /// that arrives before the block starts.
    pub fn can_transition(self, to: BlockState) -> bool {
        use BlockState::*;
        matches!(
            (self, to),
            (Requested, Queued)
                | (Requested, Failed)
                | (Queued, Active)
                | (Queued, Failed)
                | (Queued, Terminating)
                | (Active, Terminating)
                | (Active, Failed)
                | (Terminating, Done)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, BlockState::Done | BlockState::Failed)
    }

    pub fn is_pending(self) -> bool {
        matches!(self, BlockState::Requested | BlockState::Queued)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockState::Requested => "requested",
            BlockState::Queued => "queued",
            BlockState::Active => "active",
            BlockState::Terminating => "terminating",
            BlockState::Done => "done",
            BlockState::Failed => "failed",
        }
    }
}

impl fmt::Display for BlockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A process to start: program, arguments and extra environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
}

impl LaunchCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        LaunchCommand {
            program: program.into(),
            args: Vec::new(),
            env: BTreeMap::new(),
        }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }

    pub fn env(mut self, k: &str, v: impl Into<String>) -> Self {
        self.env.insert(k.to_string(), v.into());
        self
    }
}

/// How a launch command is replicated across the nodes of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LauncherSpec {
    /// One agent for the whole block.
    Single,
    /// `n` agents on every node.
    PerNode(usize),
}

impl LauncherSpec {
    pub fn parse(s: &str) -> Option<LauncherSpec> {
        match s {
            "single" => Some(LauncherSpec::Single),
            _ => {
                let n = s.strip_prefix("per_node:")?.parse().ok()?;
                (n >= 1).then_some(LauncherSpec::PerNode(n))
            }
        }
    }
}

impl fmt::Display for LauncherSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LauncherSpec::Single => f.write_str("single"),
            LauncherSpec::PerNode(n) => write!(f, "per_node:{n}"),
        }
    }
}

/// Expands `cmd` for a block of `nodes` nodes. Per-node launches carry
/// their agent and node indices in the environment.
pub fn render_launch(
    cmd: &LaunchCommand,
    launcher: LauncherSpec,
    nodes: usize,
) -> Vec<LaunchCommand> {
    let nodes = nodes.max(1);
    match launcher {
        LauncherSpec::Single => vec![cmd.clone()],
        LauncherSpec::PerNode(per) => {
            let total = per * nodes;
            (0..total)
                .map(|i| {
                    cmd.clone()
                        .env(ENV_AGENT_INDEX, i.to_string())
                        .env(ENV_AGENT_COUNT, total.to_string())
                        .env(ENV_NODE_INDEX, (i / per).to_string())
                        .env(ENV_NODE_COUNT, nodes.to_string())
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JobHandle(pub String);

impl fmt::Display for JobHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("cannot start {program}: {source}")]
    Spawn {
        program: String,
        source: std::io::Error,
    },
    #[error("unknown job {0}")]
    UnknownJob(JobHandle),
    #[error("duplicate job {0}")]
    DuplicateJob(String),
}

/// Called with the job id on every block transition.
pub type BlockObserver = Arc<dyn Fn(&str, BlockState) + Send + Sync>;

/// Uniform submit/status/cancel interface over resource backends.
pub trait Provider: Send + Sync {
    fn label(&self) -> &str;

    fn nodes_per_block(&self) -> usize;

    /// Requests a block named `block_id` running `cmd` on each of its nodes.
    /// The block id is exported to the agents as `PILOTFLOW_BLOCK_ID`.
    fn submit(&self, block_id: &str, cmd: &LaunchCommand) -> Result<JobHandle, ProviderError>;

    fn status(&self, handle: &JobHandle) -> Result<BlockState, ProviderError>;

    /// Releases the block. Cancelling a finished block does nothing.
    fn cancel(&self, handle: &JobHandle) -> Result<(), ProviderError>;

    fn set_observer(&self, observer: BlockObserver);
}
