//! Simulated batch scheduler.
//!
//! Blocks wait in a queue for a sampled delay, may be refused with a fixed
//! probability, are capped in number, and are killed when their walltime
//! runs out. Active blocks run real local processes, one launch per
//! simulated node.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{supervise, Gate, Job};
use super::channel::kill_tree;
use super::{
    render_launch, BlockObserver, BlockState, Channel, JobHandle, LaunchCommand, LauncherSpec,
    LocalChannel, Provider, ProviderError, ENV_BLOCK_ID,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueueDelay {
    Fixed(Duration),
    Uniform(Duration, Duration),
}

impl QueueDelay {
    fn sample(&self, rng: &mut impl Rng) -> Duration {
        match *self {
            QueueDelay::Fixed(d) => d,
            QueueDelay::Uniform(lo, hi) if hi > lo => rng.gen_range(lo..=hi),
            QueueDelay::Uniform(lo, _) => lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLrmConfig {
    pub queue_delay: QueueDelay,
    pub max_active_blocks: usize,
    /// Probability that a block is refused instead of starting.
    pub failure_rate: f64,
    /// Lease after which an active block is killed.
    pub walltime: Option<Duration>,
    pub nodes_per_block: usize,
    pub launcher: LauncherSpec,
    /// Label of the simulated queue.
    pub partition: String,
    pub seed: u64,
}

impl Default for SimLrmConfig {
    fn default() -> Self {
        SimLrmConfig {
            queue_delay: QueueDelay::Fixed(Duration::ZERO),
            max_active_blocks: usize::MAX,
            failure_rate: 0.0,
            walltime: None,
            nodes_per_block: 1,
            launcher: LauncherSpec::Single,
            partition: "sim".into(),
            seed: 0,
        }
    }
}

pub struct SimLrmProvider {
    label: String,
    config: SimLrmConfig,
    channel: Arc<dyn Channel>,
    rng: Mutex<ChaCha8Rng>,
    gate: Arc<Gate>,
    jobs: Mutex<HashMap<String, Arc<Job>>>,
    observer: Arc<OnceLock<BlockObserver>>,
}

impl SimLrmProvider {
    /// Panics if `failure_rate` is not a probability.
    pub fn new(label: impl Into<String>, config: SimLrmConfig) -> Self {
        assert!(
            (0.0..=1.0).contains(&config.failure_rate),
            "failure_rate must be within [0, 1]"
        );
        SimLrmProvider {
            label: label.into(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            gate: Gate::new(config.max_active_blocks),
            config,
            channel: Arc::new(LocalChannel),
            jobs: Mutex::new(HashMap::new()),
            observer: Arc::new(OnceLock::new()),
        }
    }

    pub fn config(&self) -> &SimLrmConfig {
        &self.config
    }

    fn job(&self, handle: &JobHandle) -> Result<Arc<Job>, ProviderError> {
        self.jobs
            .lock()
            .unwrap()
            .get(&handle.0)
            .cloned()
            .ok_or_else(|| ProviderError::UnknownJob(handle.clone()))
    }
}

fn run_block(
    job: Arc<Job>,
    delay: Duration,
    refuse: bool,
    commands: Vec<LaunchCommand>,
    channel: Arc<dyn Channel>,
    gate: Arc<Gate>,
    walltime: Option<Duration>,
) {
    if job.sleep(delay) || !gate.acquire(&job) {
        job.set(BlockState::Terminating);
        job.set(BlockState::Done);
        return;
    }
    if refuse {
        gate.release();
        job.set(BlockState::Failed);
        return;
    }
    let mut children = Vec::new();
    for c in &commands {
        match channel.spawn(c) {
            Ok(child) => children.push(child),
            Err(e) => {
                tracing::warn!(block = %job.id, "spawn failed: {e}");
                children.iter_mut().for_each(kill_tree);
                gate.release();
                job.set(BlockState::Failed);
                return;
            }
        }
    }
    job.set(BlockState::Active);
    supervise(&job, children, walltime);
    gate.release();
}

impl Provider for SimLrmProvider {
    fn label(&self) -> &str {
        &self.label
    }

    fn nodes_per_block(&self) -> usize {
        self.config.nodes_per_block
    }

    fn submit(&self, block_id: &str, cmd: &LaunchCommand) -> Result<JobHandle, ProviderError> {
        let job = {
            let mut jobs = self.jobs.lock().unwrap();
            if jobs.contains_key(block_id) {
                return Err(ProviderError::DuplicateJob(block_id.to_string()));
            }
            let job = Job::new(block_id, self.observer.clone());
            jobs.insert(block_id.to_string(), job.clone());
            job
        };
        let (delay, refuse) = {
            let mut rng = self.rng.lock().unwrap();
            let delay = self.config.queue_delay.sample(&mut *rng);
            (delay, rng.gen_bool(self.config.failure_rate))
        };
        // Every simulated node is its own host, so a single launch still
        // starts one agent per node.
        let per_node = match self.config.launcher {
            LauncherSpec::Single => 1,
            LauncherSpec::PerNode(n) => n,
        };
        let cmd = cmd.clone().env(ENV_BLOCK_ID, block_id);
        let commands = render_launch(
            &cmd,
            LauncherSpec::PerNode(per_node),
            self.config.nodes_per_block,
        );
        job.set(BlockState::Queued);
        let (channel, gate, walltime) = (
            self.channel.clone(),
            self.gate.clone(),
            self.config.walltime,
        );
        let runner = job.clone();
        std::thread::Builder::new()
            .name(format!("block-{block_id}"))
            .spawn(move || run_block(runner, delay, refuse, commands, channel, gate, walltime))
            .expect("spawn block thread");
        Ok(JobHandle(block_id.to_string()))
    }

    fn status(&self, handle: &JobHandle) -> Result<BlockState, ProviderError> {
        Ok(self.job(handle)?.state())
    }

    fn cancel(&self, handle: &JobHandle) -> Result<(), ProviderError> {
        let job = self.job(handle)?;
        if !job.state().is_terminal() {
            job.request_cancel();
        }
        Ok(())
    }

    fn set_observer(&self, observer: BlockObserver) {
        let _ = self.observer.set(observer);
    }
}

impl Drop for SimLrmProvider {
    fn drop(&mut self) {
        for job in self.jobs.lock().unwrap().values() {
            job.request_cancel();
        }
    }
}
