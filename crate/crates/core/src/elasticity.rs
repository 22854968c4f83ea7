//! Load-driven scaling of executor blocks.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::clock::RunClock;
use crate::executor::Executor;

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    /// How aggressively capacity follows load, in (0, 1].
    pub parallelism: f64,
    pub poll_period: Duration,
    pub idle_timeout: Duration,
    pub min_blocks: usize,
    pub max_blocks: usize,
    pub init_blocks: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            parallelism: 1.0,
            poll_period: Duration::from_secs(1),
            idle_timeout: Duration::from_secs(10),
            min_blocks: 0,
            max_blocks: 1,
            init_blocks: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("parallelism must be in (0, 1], got {0}")]
    Parallelism(f64),
    #[error("need min_blocks <= init_blocks <= max_blocks, got {min} <= {init} <= {max}")]
    Bounds { min: usize, init: usize, max: usize },
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if !(self.parallelism > 0.0 && self.parallelism <= 1.0) {
            return Err(StrategyError::Parallelism(self.parallelism));
        }
        if !(self.min_blocks <= self.init_blocks && self.init_blocks <= self.max_blocks) {
            return Err(StrategyError::Bounds {
                min: self.min_blocks,
                init: self.init_blocks,
                max: self.max_blocks,
            });
        }
        Ok(())
    }
}

/// Executor load as seen at one poll tick.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadSnapshot {
    /// Tasks submitted to the executor and not yet completed.
    pub outstanding_tasks: usize,
    /// Task slots one block contributes (nodes x workers x prefetch).
    pub slots_per_block: usize,
    pub active_slots: usize,
    pub active_blocks: usize,
    /// Blocks requested or queued but not yet active.
    pub pending_blocks: usize,
    /// Active blocks with nothing to do, and how long they have been idle.
    pub idle_blocks: Vec<(String, Duration)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    None,
    ScaleOut(usize),
    ScaleIn(Vec<String>),
}

/// Blocks needed for the current load.
pub fn required_blocks(snapshot: &LoadSnapshot, cfg: &StrategyConfig) -> usize {
    let slots = snapshot.slots_per_block.max(1) as f64;
    let want = (snapshot.outstanding_tasks as f64 * cfg.parallelism / slots).ceil() as usize;
    want.clamp(cfg.min_blocks, cfg.max_blocks)
}

/// Scale out to the required block count, or release blocks that have idled
/// past the timeout while capacity exceeds what is required. Never both.
pub fn strategy_tick(snapshot: &LoadSnapshot, cfg: &StrategyConfig) -> Decision {
    let required = required_blocks(snapshot, cfg);
    let current = snapshot.active_blocks + snapshot.pending_blocks;
    if current < required {
        return Decision::ScaleOut(required - current);
    }
    let excess = current - required;
    if excess == 0 {
        return Decision::None;
    }
    let mut idle: Vec<&(String, Duration)> = snapshot
        .idle_blocks
        .iter()
        .filter(|(_, age)| *age >= cfg.idle_timeout)
        .collect();
    idle.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let chosen: Vec<String> = idle
        .into_iter()
        .take(excess)
        .map(|(id, _)| id.clone())
        .collect();
    if chosen.is_empty() {
        Decision::None
    } else {
        Decision::ScaleIn(chosen)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingEvent {
    pub timestamp_us: u64,
    pub executor: String,
    pub decision: Decision,
    pub outstanding: usize,
    pub active_blocks: usize,
    pub pending_blocks: usize,
}

impl ScalingEvent {
    /// `ts_us<TAB>executor<TAB>decision<TAB>outstanding<TAB>active<TAB>pending`
    pub fn to_line(&self) -> String {
        let decision = match &self.decision {
            Decision::None => "none".to_string(),
            Decision::ScaleOut(k) => format!("scale_out:{k}"),
            Decision::ScaleIn(ids) => format!("scale_in:{}", ids.join(",")),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.timestamp_us,
            self.executor,
            decision,
            self.outstanding,
            self.active_blocks,
            self.pending_blocks
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineSample {
    pub timestamp_us: u64,
    pub outstanding: usize,
    pub active_blocks: usize,
    pub pending_blocks: usize,
}

#[derive(Debug, Default)]
struct LogInner {
    events: Vec<ScalingEvent>,
    timeline: Vec<(String, TimelineSample)>,
}

/// Scaling decisions plus a per-tick block-count timeline.
#[derive(Debug, Clone, Default)]
pub struct ScalingLog {
    inner: Arc<Mutex<LogInner>>,
}

impl ScalingLog {
    pub fn events(&self) -> Vec<ScalingEvent> {
        self.inner.lock().unwrap().events.clone()
    }

    pub fn timeline(&self, executor: &str) -> Vec<TimelineSample> {
        self.inner
            .lock()
            .unwrap()
            .timeline
            .iter()
            .filter(|(e, _)| e == executor)
            .map(|(_, s)| *s)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(
            "#ts_us\texecutor\tdecision\toutstanding\tactive_blocks\tpending_blocks\n",
        );
        for e in self.events() {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }
}

/// Background thread ticking the strategy for every scalable executor.
pub struct StrategyLoop {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    log: ScalingLog,
}

impl StrategyLoop {
    pub fn start(
        targets: Vec<(Arc<dyn Executor>, StrategyConfig)>,
        poll_period: Duration,
        clock: RunClock,
    ) -> StrategyLoop {
        let stop = Arc::new(AtomicBool::new(false));
        let log = ScalingLog::default();
        let (stop2, log2) = (stop.clone(), log.clone());
        let handle = std::thread::Builder::new()
            .name("strategy".into())
            .spawn(move || {
                while !stop2.load(Ordering::SeqCst) {
                    for (exec, cfg) in &targets {
                        tick_once(exec.as_ref(), cfg, &clock, &log2);
                    }
                    std::thread::sleep(poll_period);
                }
            })
            .expect("spawn strategy thread");
        StrategyLoop {
            stop,
            handle: Some(handle),
            log,
        }
    }

    pub fn log(&self) -> &ScalingLog {
        &self.log
    }

    pub fn stop(mut self) -> ScalingLog {
        self.halt();
        self.log.clone()
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StrategyLoop {
    fn drop(&mut self) {
        self.halt();
    }
}

/// One strategy evaluation against `exec`. Returns the decision taken.
pub fn tick_once(
    exec: &dyn Executor,
    cfg: &StrategyConfig,
    clock: &RunClock,
    log: &ScalingLog,
) -> Decision {
    let Some(snap) = exec.load_snapshot() else {
        return Decision::None;
    };
    let ts = clock.now_us();
    let decision = strategy_tick(&snap, cfg);
    let outcome = match &decision {
        Decision::None => Ok(()),
        Decision::ScaleOut(k) => exec.scale_out(*k).map(|_| ()),
        Decision::ScaleIn(ids) => exec.scale_in(ids),
    };
    if let Err(e) = outcome {
        tracing::warn!(executor = exec.label(), "scaling failed: {e}");
    }
    let mut inner = log.inner.lock().unwrap();
    inner.timeline.push((
        exec.label().to_string(),
        TimelineSample {
            timestamp_us: ts,
            outstanding: snap.outstanding_tasks,
            active_blocks: snap.active_blocks,
            pending_blocks: snap.pending_blocks,
        },
    ));
    if decision != Decision::None {
        tracing::info!(
            executor = exec.label(),
            ?decision,
            outstanding = snap.outstanding_tasks,
            "scaling"
        );
        inner.events.push(ScalingEvent {
            timestamp_us: ts,
            executor: exec.label().to_string(),
            decision: decision.clone(),
            outstanding: snap.outstanding_tasks,
            active_blocks: snap.active_blocks,
            pending_blocks: snap.pending_blocks,
        });
    }
    decision
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(parallelism: f64, min: usize, max: usize) -> StrategyConfig {
        StrategyConfig {
            parallelism,
            min_blocks: min,
            max_blocks: max,
            init_blocks: min,
            ..StrategyConfig::default()
        }
    }

    fn snap(outstanding: usize, active: usize, idle: &[(&str, u64)]) -> LoadSnapshot {
        LoadSnapshot {
            outstanding_tasks: outstanding,
            slots_per_block: 1,
            active_slots: active,
            active_blocks: active,
            pending_blocks: 0,
            idle_blocks: idle
                .iter()
                .map(|(id, s)| (id.to_string(), Duration::from_secs(*s)))
                .collect(),
        }
    }

    #[test]
    fn idle_drain_releases_everything() {
        let d = strategy_tick(&snap(0, 2, &[("a", 20), ("b", 30)]), &cfg(1.0, 0, 8));
        assert_eq!(d, Decision::ScaleIn(vec!["b".into(), "a".into()]));
    }

    #[test]
    fn scale_out_is_clamped() {
        assert_eq!(
            strategy_tick(&snap(20, 0, &[]), &cfg(1.0, 0, 8)),
            Decision::ScaleOut(8)
        );
        assert_eq!(required_blocks(&snap(20, 0, &[]), &cfg(0.5, 0, 100)), 10);
        assert_eq!(
            strategy_tick(&snap(1000, 1, &[]), &cfg(1.0, 0, 1)),
            Decision::None
        );
    }

    #[test]
    fn young_idle_blocks_are_kept() {
        assert_eq!(
            strategy_tick(&snap(0, 2, &[("a", 5), ("b", 9)]), &cfg(1.0, 0, 8)),
            Decision::None
        );
    }

    #[test]
    fn min_blocks_are_kept() {
        let d = strategy_tick(
            &snap(0, 3, &[("a", 20), ("b", 30), ("c", 40)]),
            &cfg(1.0, 2, 8),
        );
        assert_eq!(d, Decision::ScaleIn(vec!["c".into()]));
    }

    #[test]
    fn validation() {
        assert!(cfg(0.0, 0, 1).validate().is_err());
        assert!(cfg(1.5, 0, 1).validate().is_err());
        let mut c = cfg(1.0, 0, 1);
        c.init_blocks = 2;
        assert!(c.validate().is_err());
        assert!(cfg(0.25, 0, 4).validate().is_ok());
    }
}
