//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! retries = 1
//!
//! [strategy]
//! enabled = true
//! parallelism = 0.5
//!
//! [[executors]]
//! label = "htex"
//! type = "htex"
//! workers_per_node = 4
//!
//! [executors.provider]
//! type = "sim"
//! nodes_per_block = 2
//! init_blocks = 1
//! max_blocks = 4
//! walltime = "00:10:00"
//! launcher = "per_node:1"
//! ```
//!
//! Durations other than `walltime` are seconds.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use pilotflow_core::elasticity::StrategyConfig;
use pilotflow_core::provider::LauncherSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Syntax(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutorKind {
    Htex,
    Llex,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Local,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(rename = "type")]
    pub kind: ProviderKind,
    #[serde(default = "one")]
    pub nodes_per_block: usize,
    #[serde(default = "one")]
    pub init_blocks: usize,
    #[serde(default)]
    pub min_blocks: usize,
    #[serde(default = "one")]
    pub max_blocks: usize,
    /// `HH:MM:SS`; sim provider only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walltime: Option<String>,
    /// `single` or `per_node:N`.
    #[serde(default = "single")]
    pub launcher: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<String>,
    #[serde(default)]
    pub queue_delay: f64,
    #[serde(default)]
    pub failure_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_active_blocks: Option<usize>,
}

fn one() -> usize {
    1
}

fn single() -> String {
    "single".into()
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Local,
            nodes_per_block: 1,
            init_blocks: 1,
            min_blocks: 0,
            max_blocks: 1,
            walltime: None,
            launcher: single(),
            partition: None,
            queue_delay: 0.0,
            failure_rate: 0.0,
            max_active_blocks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorConfig {
    pub label: String,
    #[serde(rename = "type")]
    pub kind: ExecutorKind,
    /// Worker count for `local` and `llex`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers_per_node: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefetch_capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heartbeat_period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heartbeat_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replication_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resends: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderConfig>,
}

impl ExecutorConfig {
    pub fn new(label: impl Into<String>, kind: ExecutorKind) -> Self {
        ExecutorConfig {
            label: label.into(),
            kind,
            workers: None,
            workers_per_node: None,
            prefetch_capacity: None,
            heartbeat_period: None,
            heartbeat_threshold: None,
            batch_size_max: None,
            replication_factor: None,
            timeout: None,
            resends: None,
            provider: None,
        }
    }

    pub fn provider_or_default(&self) -> ProviderConfig {
        self.provider.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "full")]
    pub parallelism: f64,
    #[serde(default = "poll_default")]
    pub poll_period: f64,
    #[serde(default = "idle_default")]
    pub idle_timeout: f64,
}

fn full() -> f64 {
    1.0
}
fn poll_default() -> f64 {
    1.0
}
fn idle_default() -> f64 {
    10.0
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            enabled: false,
            parallelism: full(),
            poll_period: poll_default(),
            idle_timeout: idle_default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSection {
    #[serde(default)]
    pub enabled: bool,
    /// Checkpoints loaded at start.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
    /// Where this run appends its checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor_log: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_timeout: Option<f64>,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub checkpointing: CheckpointSection,
    pub executors: Vec<ExecutorConfig>,
}

impl Default for RunConfig {
    /// One local executor with a worker per core.
    fn default() -> Self {
        let mut local = ExecutorConfig::new("local", ExecutorKind::Local);
        local.workers = Some(std::thread::available_parallelism().map_or(1, |n| n.get()));
        RunConfig {
            seed: 0,
            retries: 0,
            monitor_log: None,
            sandbox: None,
            task_timeout: None,
            strategy: StrategySection::default(),
            checkpointing: CheckpointSection::default(),
            executors: vec![local],
        }
    }
}

/// Parses `HH:MM:SS` (or `MM:SS`, or plain seconds).
pub fn parse_walltime(s: &str) -> Option<Duration> {
    let parts: Vec<u64> = s
        .split(':')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    let secs = match parts[..] {
        [s] => s,
        [m, s] if s < 60 => m * 60 + s,
        [h, m, s] if m < 60 && s < 60 => h * 3600 + m * 60 + s,
        _ => return None,
    };
    Some(Duration::from_secs(secs))
}

fn positive_secs(field: String, v: Option<f64>) -> Result<(), ConfigError> {
    match v {
        Some(s) if !(s.is_finite() && s > 0.0) => Err(invalid(
            field,
            format!("must be a positive number of seconds, got {s}"),
        )),
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.executors.is_empty() {
            return Err(invalid("executors", "at least one executor is required"));
        }
        let mut labels = BTreeSet::new();
        for (i, e) in self.executors.iter().enumerate() {
            let at = |f: &str| format!("executors[{i}].{f}");
            if e.label.is_empty() {
                return Err(invalid(at("label"), "must not be empty"));
            }
            if !labels.insert(e.label.as_str()) {
                return Err(invalid(
                    at("label"),
                    format!("duplicate label {:?}", e.label),
                ));
            }
            let only = |present: bool, field: &str, kinds: &[ExecutorKind]| {
                if present && !kinds.contains(&e.kind) {
                    Err(invalid(
                        at(field),
                        format!("not valid for a {:?} executor", e.kind).to_lowercase(),
                    ))
                } else {
                    Ok(())
                }
            };
            use ExecutorKind::*;
            only(e.workers.is_some(), "workers", &[Local, Llex])?;
            only(e.workers_per_node.is_some(), "workers_per_node", &[Htex])?;
            only(e.prefetch_capacity.is_some(), "prefetch_capacity", &[Htex])?;
            only(e.heartbeat_period.is_some(), "heartbeat_period", &[Htex])?;
            only(
                e.heartbeat_threshold.is_some(),
                "heartbeat_threshold",
                &[Htex],
            )?;
            only(e.batch_size_max.is_some(), "batch_size_max", &[Htex])?;
            only(e.provider.is_some(), "provider", &[Htex])?;
            only(
                e.replication_factor.is_some(),
                "replication_factor",
                &[Llex],
            )?;
            only(e.timeout.is_some(), "timeout", &[Llex])?;
            only(e.resends.is_some(), "resends", &[Llex])?;
            if e.kind == Local && e.workers == Some(0) {
                return Err(invalid(at("workers"), "must be at least 1"));
            }
            if e.workers_per_node == Some(0) {
                return Err(invalid(at("workers_per_node"), "must be at least 1"));
            }
            if e.replication_factor == Some(0) {
                return Err(invalid(at("replication_factor"), "must be at least 1"));
            }
            positive_secs(at("heartbeat_period"), e.heartbeat_period)?;
            positive_secs(at("heartbeat_threshold"), e.heartbeat_threshold)?;
            positive_secs(at("timeout"), e.timeout)?;
            let period = e.heartbeat_period.unwrap_or(2.0);
            if e.heartbeat_threshold.unwrap_or(6.0) <= period {
                return Err(invalid(
                    at("heartbeat_threshold"),
                    "must exceed heartbeat_period",
                ));
            }
            if let Some(p) = &e.provider {
                let at = |f: &str| format!("executors[{i}].provider.{f}");
                if p.nodes_per_block == 0 {
                    return Err(invalid(at("nodes_per_block"), "must be at least 1"));
                }
                if LauncherSpec::parse(&p.launcher).is_none() {
                    return Err(invalid(
                        at("launcher"),
                        format!("unknown launcher {:?}", p.launcher),
                    ));
                }
                if !(p.min_blocks <= p.init_blocks && p.init_blocks <= p.max_blocks) {
                    return Err(invalid(
                        at("init_blocks"),
                        format!(
                            "need min_blocks <= init_blocks <= max_blocks, got {} <= {} <= {}",
                            p.min_blocks, p.init_blocks, p.max_blocks
                        ),
                    ));
                }
                if let Some(w) = &p.walltime {
                    if p.kind != ProviderKind::Sim {
                        return Err(invalid(
                            at("walltime"),
                            "only the sim provider enforces a walltime",
                        ));
                    }
                    if parse_walltime(w).is_none() {
                        return Err(invalid(
                            at("walltime"),
                            format!("expected HH:MM:SS, got {w:?}"),
                        ));
                    }
                }
                if !(0.0..=1.0).contains(&p.failure_rate) {
                    return Err(invalid(at("failure_rate"), "must be within [0, 1]"));
                }
                if !(p.queue_delay.is_finite() && p.queue_delay >= 0.0) {
                    return Err(invalid(
                        at("queue_delay"),
                        "must be a non-negative number of seconds",
                    ));
                }
                if p.kind == ProviderKind::Local && (p.queue_delay > 0.0 || p.failure_rate > 0.0) {
                    return Err(invalid(
                        at("type"),
                        "queue_delay and failure_rate need the sim provider",
                    ));
                }
            }
        }
        let s = &self.strategy;
        if !(s.parallelism > 0.0 && s.parallelism <= 1.0) {
            return Err(invalid(
                "strategy.parallelism",
                format!("must be in (0, 1], got {}", s.parallelism),
            ));
        }
        positive_secs("strategy.poll_period".into(), Some(s.poll_period))?;
        if !(s.idle_timeout.is_finite() && s.idle_timeout >= 0.0) {
            return Err(invalid(
                "strategy.idle_timeout",
                "must be a non-negative number of seconds",
            ));
        }
        positive_secs("task_timeout".into(), self.task_timeout)?;
        Ok(())
    }

    /// Scaling limits for one htex executor, from its provider section and
    /// the shared strategy settings.
    pub fn strategy_for(&self, exec: &ExecutorConfig) -> StrategyConfig {
        let p = exec.provider_or_default();
        StrategyConfig {
            parallelism: self.strategy.parallelism,
            poll_period: Duration::from_secs_f64(self.strategy.poll_period),
            idle_timeout: Duration::from_secs_f64(self.strategy.idle_timeout),
            min_blocks: p.min_blocks,
            max_blocks: p.max_blocks,
            init_blocks: p.init_blocks,
        }
    }
}
