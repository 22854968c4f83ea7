//! Summary of a monitor log: task outcomes, makespan and utilization.

use std::collections::BTreeMap;
use std::path::Path;

use pilotflow_core::monitor::{
    compute_utilization, read_log, replay_histories, LogError, ReplayError, UtilizationError,
};
use pilotflow_core::TaskState;
use thiserror::Error;

use crate::bench::BenchReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Utilization(#[from] UtilizationError),
}

/// Reads `path`, checks every task history and summarizes the run. Samples
/// are per-task busy times in seconds.
pub fn summarize(path: &Path) -> Result<BenchReport, ReportError> {
    let log = read_log(path)?;
    let histories = replay_histories(&log.events)?;
    let mut report = BenchReport::new("report", "s");
    report.set("run", &log.header.run_id);
    report.set("seed", log.header.seed);
    report.set("tasks", histories.len());
    let mut finals: BTreeMap<&'static str, usize> = BTreeMap::new();
    for h in histories.values() {
        let last = h.last().copied().unwrap_or(TaskState::Pending);
        *finals.entry(last.as_str()).or_default() += 1;
    }
    for (state, n) in finals {
        report.set(&format!("final_{state}"), n);
    }
    let has_launch = histories.values().any(|h| h.contains(&TaskState::Running));
    if has_launch {
        let u = compute_utilization(&log.events)?;
        report.set("utilization_pct", format!("{:.2}", u.utilization));
        report.set("makespan_s", format!("{:.3}", u.makespan_us as f64 / 1e6));
        for (manager, spans) in &u.busy_intervals {
            let busy: u64 = spans.iter().map(|(a, b)| b - a).sum();
            let mut row = BTreeMap::new();
            row.insert("manager".to_string(), manager.clone());
            row.insert("tasks".to_string(), spans.len().to_string());
            row.insert("busy_s".to_string(), format!("{:.3}", busy as f64 / 1e6));
            report.rows.push(row);
            report
                .samples
                .extend(spans.iter().map(|(a, b)| (b - a) as f64 / 1e6));
        }
    }
    Ok(report)
}
