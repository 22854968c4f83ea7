//! Fork-style provider: blocks are process trees on the local host.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::block::{supervise, Job};
use super::channel::kill_tree;
use super::{
    render_launch, BlockObserver, BlockState, Channel, JobHandle, LaunchCommand, LauncherSpec,
    LocalChannel, Provider, ProviderError, ENV_BLOCK_ID,
};

pub struct LocalProvider {
    label: String,
    nodes_per_block: usize,
    launcher: LauncherSpec,
    channel: Arc<dyn Channel>,
    jobs: Mutex<HashMap<String, Arc<Job>>>,
    observer: Arc<OnceLock<BlockObserver>>,
}

impl LocalProvider {
    pub fn new(label: impl Into<String>) -> Self {
        LocalProvider {
            label: label.into(),
            nodes_per_block: 1,
            launcher: LauncherSpec::Single,
            channel: Arc::new(LocalChannel),
            jobs: Mutex::new(HashMap::new()),
            observer: Arc::new(OnceLock::new()),
        }
    }

    pub fn with_nodes(mut self, nodes: usize) -> Self {
        self.nodes_per_block = nodes.max(1);
        self
    }

    pub fn with_launcher(mut self, launcher: LauncherSpec) -> Self {
        self.launcher = launcher;
        self
    }

    pub fn with_channel(mut self, channel: Arc<dyn Channel>) -> Self {
        self.channel = channel;
        self
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

impl Provider for LocalProvider {
    fn label(&self) -> &str {
        &self.label
    }

    fn nodes_per_block(&self) -> usize {
        self.nodes_per_block
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
        job.set(BlockState::Queued);
        let cmd = cmd.clone().env(ENV_BLOCK_ID, block_id);
        let mut children = Vec::new();
        for c in render_launch(&cmd, self.launcher, self.nodes_per_block) {
            match self.channel.spawn(&c) {
                Ok(child) => children.push(child),
                Err(source) => {
                    children.iter_mut().for_each(kill_tree);
                    job.set(BlockState::Failed);
                    return Err(ProviderError::Spawn {
                        program: c.program.display().to_string(),
                        source,
                    });
                }
            }
        }
        job.set(BlockState::Active);
        let watcher = job.clone();
        std::thread::Builder::new()
            .name(format!("block-{block_id}"))
            .spawn(move || supervise(&watcher, children, None))
            .expect("spawn block supervisor");
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

impl Drop for LocalProvider {
    fn drop(&mut self) {
        for job in self.jobs.lock().unwrap().values() {
            job.request_cancel();
        }
    }
}
