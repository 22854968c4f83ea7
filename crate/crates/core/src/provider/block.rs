//! Block bookkeeping shared by the providers.

use std::process::Child;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use super::channel::kill_tree;
use super::{BlockObserver, BlockState};

const SUPERVISE_TICK: Duration = Duration::from_millis(20);

pub(crate) struct Job {
    pub id: String,
    state: Mutex<BlockState>,
    wake: Condvar,
    cancel: AtomicBool,
    observer: Arc<OnceLock<BlockObserver>>,
}

impl Job {
    pub fn new(id: &str, observer: Arc<OnceLock<BlockObserver>>) -> Arc<Job> {
        Arc::new(Job {
            id: id.to_string(),
            state: Mutex::new(BlockState::Requested),
            wake: Condvar::new(),
            cancel: AtomicBool::new(false),
            observer,
        })
    }

    pub fn state(&self) -> BlockState {
        *self.state.lock().unwrap()
    }

    /// Applies a legal transition and notifies the observer.
    pub fn set(&self, to: BlockState) -> bool {
        {
            let mut s = self.state.lock().unwrap();
            if !s.can_transition(to) {
                tracing::warn!(block = %self.id, from = %*s, %to, "illegal block transition ignored");
                return false;
            }
            *s = to;
            self.wake.notify_all();
        }
        tracing::debug!(block = %self.id, state = %to, "block transition");
        if let Some(obs) = self.observer.get() {
            obs(&self.id, to);
        }
        true
    }

    pub fn request_cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
        let _s = self.state.lock().unwrap();
        self.wake.notify_all();
    }

    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Sleeps for `dur` unless a cancel arrives first; returns true if
    /// cancelled.
    pub fn sleep(&self, dur: Duration) -> bool {
        let deadline = Instant::now() + dur;
        let mut s = self.state.lock().unwrap();
        loop {
            if self.cancelled() {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            s = self.wake.wait_timeout(s, deadline - now).unwrap().0;
        }
    }
}

/// Caps the number of simultaneously active blocks.
pub(crate) struct Gate {
    active: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Gate {
    pub fn new(limit: usize) -> Arc<Gate> {
        Arc::new(Gate {
            active: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
        })
    }

    /// Waits for a free slot; gives up (returning false) if `job` is
    /// cancelled meanwhile.
    pub fn acquire(&self, job: &Job) -> bool {
        let mut active = self.active.lock().unwrap();
        loop {
            if job.cancelled() {
                return false;
            }
            if *active < self.limit {
                *active += 1;
                return true;
            }
            active = self.freed.wait_timeout(active, SUPERVISE_TICK).unwrap().0;
        }
    }

    pub fn release(&self) {
        let mut active = self.active.lock().unwrap();
        *active = active.saturating_sub(1);
        self.freed.notify_all();
    }
}

/// Watches an active block until it is cancelled, hits its walltime, or
/// all of its processes exit.
pub(crate) fn supervise(job: &Job, mut children: Vec<Child>, walltime: Option<Duration>) {
    let started = Instant::now();
    loop {
        let cancelled = job.sleep(SUPERVISE_TICK);
        let expired = walltime.is_some_and(|w| started.elapsed() >= w);
        if cancelled || expired {
            if expired {
                tracing::info!(block = %job.id, "walltime reached, killing block");
            }
            job.set(BlockState::Terminating);
            children.iter_mut().for_each(kill_tree);
            job.set(BlockState::Done);
            return;
        }
        let mut all_exited = true;
        let mut any_failed = false;
        for c in children.iter_mut() {
            match c.try_wait() {
                Ok(Some(status)) => any_failed |= !status.success(),
                Ok(None) => all_exited = false,
                Err(_) => any_failed = true,
            }
        }
        if all_exited {
            if any_failed {
                job.set(BlockState::Failed);
            } else {
                job.set(BlockState::Terminating);
                job.set(BlockState::Done);
            }
            return;
        }
    }
}
