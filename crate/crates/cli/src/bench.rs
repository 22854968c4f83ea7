//! Benchmarks: latency, throughput, scaling and elasticity.
//!
//! Every benchmark builds its executors through [`Runtime`] and returns a
//! [`BenchReport`] holding the raw samples next to their summary.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use pilotflow_core::agent::AgentCommand;
use pilotflow_core::elasticity::TimelineSample;
use pilotflow_core::monitor::{compute_utilization, MemorySink, MonitorSink};
use pilotflow_core::{Call, Value};
use statrs::statistics::{Data, Distribution, Max, Min, OrderStatistics};

use crate::config::{
    ExecutorConfig, ExecutorKind, ProviderConfig, ProviderKind, RunConfig, StrategySection,
};
use crate::programs::{four_stage, FourStage};
use crate::runtime::{RunError, RunOptions, Runtime};

const READY_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchExecutor {
    Local,
    Htex,
    Llex,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub p99: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(samples: &[f64]) -> Option<Stats> {
        if samples.is_empty() {
            return None;
        }
        let mut d = Data::new(samples.to_vec());
        Some(Stats {
            count: samples.len(),
            min: d.min(),
            median: d.median(),
            mean: d.mean().unwrap_or(f64::NAN),
            p99: d.percentile(99),
            max: d.max(),
        })
    }
}

pub type Row = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub experiment: String,
    pub parameters: BTreeMap<String, String>,
    /// Unit of `samples`.
    pub unit: String,
    pub samples: Vec<f64>,
    /// Tabular results, for experiments that produce a table.
    pub rows: Vec<Row>,
    pub environment: BTreeMap<String, String>,
}

fn row<const N: usize>(fields: [(&str, String); N]) -> Row {
    fields
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// Host facts recorded with every report.
pub fn environment() -> BTreeMap<String, String> {
    let mut env = BTreeMap::new();
    env.insert("os".into(), std::env::consts::OS.into());
    env.insert("arch".into(), std::env::consts::ARCH.into());
    env.insert(
        "cpus".into(),
        std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .to_string(),
    );
    env.insert("pilotflow".into(), env!("CARGO_PKG_VERSION").into());
    if let Ok(h) = std::fs::read_to_string("/etc/hostname") {
        env.insert("host".into(), h.trim().to_string());
    }
    env
}

impl BenchReport {
    pub fn new(experiment: &str, unit: &str) -> Self {
        BenchReport {
            experiment: experiment.into(),
            parameters: BTreeMap::new(),
            unit: unit.into(),
            samples: Vec::new(),
            rows: Vec::new(),
            environment: environment(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.parameters.insert(key.into(), value.to_string());
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.parameters.get(key)?.parse().ok()
    }

    pub fn stats(&self) -> Option<Stats> {
        Stats::of(&self.samples)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("experiment: {}\n", self.experiment);
        for (k, v) in &self.parameters {
            s.push_str(&format!("  {k} = {v}\n"));
        }
        match self.stats() {
            Some(st) => s.push_str(&format!(
                "samples: {} ({})\n  min {:.3}  median {:.3}  mean {:.3}  p99 {:.3}  max {:.3}\n",
                st.count, self.unit, st.min, st.median, st.mean, st.p99, st.max
            )),
            None => s.push_str("samples: 0\n"),
        }
        if let Some(first) = self.rows.first() {
            let keys: Vec<&String> = first.keys().collect();
            s.push_str(
                &keys
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join("\t"),
            );
            s.push('\n');
            for r in &self.rows {
                let cells: Vec<&str> = keys
                    .iter()
                    .map(|k| r.get(*k).map_or("", String::as_str))
                    .collect();
                s.push_str(&cells.join("\t"));
                s.push('\n');
            }
        }
        s
    }

    /// Long-format CSV: `experiment,section,index,key,value` with sections
    /// `param`, `env`, `summary`, `sample` and `row`.
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["experiment", "section", "index", "key", "value"])?;
        let e = self.experiment.as_str();
        for (k, v) in &self.parameters {
            w.write_record([e, "param", "", k, v])?;
        }
        for (k, v) in &self.environment {
            w.write_record([e, "env", "", k, v])?;
        }
        if let Some(st) = self.stats() {
            for (k, v) in [
                ("count", st.count as f64),
                ("min", st.min),
                ("median", st.median),
                ("mean", st.mean),
                ("p99", st.p99),
                ("max", st.max),
            ] {
                w.write_record([e, "summary", "", k, &v.to_string()])?;
            }
        }
        for (i, v) in self.samples.iter().enumerate() {
            w.write_record([e, "sample", &i.to_string(), &self.unit, &v.to_string()])?;
        }
        for (i, r) in self.rows.iter().enumerate() {
            for (k, v) in r {
                w.write_record([e, "row", &i.to_string(), k, v])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Agent and scratch space shared by the benchmarks.
#[derive(Debug, Clone)]
pub struct BenchEnv {
    pub agent: AgentCommand,
    pub work_dir: PathBuf,
    pub seed: u64,
}

impl BenchEnv {
    fn options(&self, name: &str) -> RunOptions {
        let mut o = RunOptions::new(self.agent.clone(), self.work_dir.join(name));
        o.seed = Some(self.seed);
        o
    }

    fn start(
        &self,
        name: &str,
        cfg: &RunConfig,
        sink: Option<Arc<dyn MonitorSink>>,
    ) -> Result<Runtime, RunError> {
        let rt = Runtime::start_with_monitor(cfg, &self.options(name), sink)?;
        if !rt.wait_for_workers(READY_TIMEOUT) {
            tracing::warn!(bench = name, "not every manager registered in time");
        }
        Ok(rt)
    }
}

/// A single executor labelled `bench` with `workers` workers in one block.
pub fn single_executor(kind: BenchExecutor, workers: usize, prefetch: usize) -> RunConfig {
    let mut e = match kind {
        BenchExecutor::Local => ExecutorConfig::new("bench", ExecutorKind::Local),
        BenchExecutor::Htex => ExecutorConfig::new("bench", ExecutorKind::Htex),
        BenchExecutor::Llex => ExecutorConfig::new("bench", ExecutorKind::Llex),
    };
    match kind {
        BenchExecutor::Htex => {
            e.workers_per_node = Some(workers.max(1));
            e.prefetch_capacity = Some(prefetch);
        }
        _ => e.workers = Some(workers.max(1)),
    }
    RunConfig {
        executors: vec![e],
        ..RunConfig::default()
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// Sequential no-op round trips against one pre-connected worker.
pub fn latency(env: &BenchEnv, kind: BenchExecutor, tasks: usize) -> Result<BenchReport, RunError> {
    let mut report = BenchReport::new("latency", "ms");
    report.set("executor", format!("{kind:?}").to_lowercase());
    report.set("tasks", tasks);
    let rt = env.start("latency", &single_executor(kind, 1, 0), None)?;
    for _ in 0..20.min(tasks.max(1)) {
        let _ = rt.dfk.call("noop", vec![])?.result();
    }
    let mut failed = 0;
    for _ in 0..tasks {
        let t0 = Instant::now();
        let f = rt.dfk.call("noop", vec![])?;
        if f.result().is_err() {
            failed += 1;
        }
        report.samples.push(ms(t0.elapsed()));
    }
    report.set("failed", failed);
    if let Some(st) = report.stats() {
        report.set("median_ms", format!("{:.4}", st.median));
    }
    rt.shutdown();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputOptions {
    pub tasks: usize,
    pub workers: usize,
    /// Sleep per task; zero runs no-ops.
    pub task_ms: f64,
    pub prefetch: usize,
}

/// Submits all tasks at once and reports tasks per second. Samples are the
/// completion times of the individual tasks, in seconds since the first
/// submission.
pub fn throughput(
    env: &BenchEnv,
    kind: BenchExecutor,
    opts: ThroughputOptions,
) -> Result<BenchReport, RunError> {
    let mut report = BenchReport::new("throughput", "s");
    report.set("executor", format!("{kind:?}").to_lowercase());
    report.set("tasks", opts.tasks);
    report.set("workers", opts.workers);
    report.set("task_ms", opts.task_ms);
    report.set("prefetch", opts.prefetch);
    if opts.tasks == 0 {
        return Ok(report);
    }
    let rt = env.start(
        "throughput",
        &single_executor(kind, opts.workers, opts.prefetch),
        None,
    )?;
    let warm: Vec<_> = (0..opts.workers)
        .map(|_| rt.dfk.call("noop", vec![]))
        .collect::<Result<_, _>>()?;
    warm.iter().for_each(|f| {
        let _ = f.result();
    });
    let app = rt
        .dfk
        .app(if opts.task_ms > 0.0 { "sleep" } else { "noop" })?;
    let first = rt.dfk.tasks().len();
    let t0 = Instant::now();
    for _ in 0..opts.tasks {
        let call = Call::new(app.clone());
        let call = if opts.task_ms > 0.0 {
            call.arg(Value::Float(opts.task_ms))
        } else {
            call
        };
        rt.dfk.submit(call)?;
    }
    let summary = rt.dfk.wait_all();
    let elapsed = t0.elapsed().as_secs_f64();
    let tasks = rt.dfk.tasks();
    let start_us = tasks[first].submit_time;
    report.samples = tasks[first..]
        .iter()
        .filter_map(|t| t.complete_time)
        .map(|c| c.saturating_sub(start_us) as f64 / 1e6)
        .collect();
    report.set("elapsed_s", format!("{elapsed:.4}"));
    report.set("throughput", format!("{:.2}", opts.tasks as f64 / elapsed));
    report.set("failed", summary.failed);
    rt.shutdown();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScalingMode {
    Strong,
    Weak,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingOptions {
    pub mode: ScalingMode,
    pub durations_ms: Vec<u64>,
    pub workers: Vec<usize>,
    /// Total tasks in strong mode; weak mode runs 10 per worker.
    pub tasks: usize,
}

/// Completion time of a bag of sleep tasks over increasing worker counts on
/// an htex executor. One row per (workers, duration).
pub fn scaling(env: &BenchEnv, opts: &ScalingOptions) -> Result<BenchReport, RunError> {
    let mut report = BenchReport::new("scaling", "s");
    report.set("mode", format!("{:?}", opts.mode).to_lowercase());
    report.set(
        "durations_ms",
        opts.durations_ms
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    report.set(
        "workers",
        opts.workers
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    let mut fit: Vec<(f64, f64)> = Vec::new();
    for &w in &opts.workers {
        let rt = env.start(
            &format!("scaling-{w}"),
            &single_executor(BenchExecutor::Htex, w, 0),
            None,
        )?;
        let warm: Vec<_> = (0..w)
            .map(|_| rt.dfk.call("noop", vec![]))
            .collect::<Result<_, _>>()?;
        warm.iter().for_each(|f| {
            let _ = f.result();
        });
        let sleep = rt.dfk.app("sleep")?;
        for &d in &opts.durations_ms {
            let n = match opts.mode {
                ScalingMode::Strong => opts.tasks,
                ScalingMode::Weak => 10 * w,
            };
            let t0 = Instant::now();
            for _ in 0..n {
                rt.dfk
                    .submit(Call::new(sleep.clone()).arg(Value::Int(d as i64)))?;
            }
            let summary = rt.dfk.wait_all();
            let took = t0.elapsed().as_secs_f64();
            let ideal = n.div_ceil(w) as f64 * d as f64 / 1000.0;
            report.samples.push(took);
            if d == *opts.durations_ms.last().unwrap_or(&0) {
                fit.push((w as f64, took));
            }
            report.rows.push(row([
                ("workers", w.to_string()),
                ("duration_ms", d.to_string()),
                ("tasks", n.to_string()),
                ("completion_s", format!("{took:.4}")),
                ("ideal_s", format!("{ideal:.4}")),
                ("failed", summary.failed.to_string()),
            ]));
        }
        rt.shutdown();
    }
    if fit.len() >= 2 {
        let (slope, _) = least_squares(&fit);
        report.set("slope_s_per_worker", format!("{slope:.6}"));
        let monotone =
            fit.windows(2).all(|p| p[1].1 >= p[0].1) || fit.windows(2).all(|p| p[1].1 <= p[0].1);
        report.set("monotone", monotone);
    }
    Ok(report)
}

/// Ordinary least squares `y = a x + b`; returns `(a, b)`.
pub fn least_squares(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let a = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    (a, my - a * mx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticityOptions {
    pub workflow: FourStage,
    pub parallelism: f64,
    pub poll_period: Duration,
    pub idle_timeout: Duration,
    /// Simulated scheduler queue delay per block.
    pub queue_delay: Duration,
}

impl Default for ElasticityOptions {
    fn default() -> Self {
        ElasticityOptions {
            workflow: FourStage::default(),
            parallelism: 1.0,
            poll_period: Duration::from_millis(50),
            idle_timeout: Duration::from_millis(300),
            queue_delay: Duration::from_millis(100),
        }
    }
}

/// Result of one run of the four-stage workflow.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticRun {
    pub utilization: f64,
    pub makespan_s: f64,
    /// (first launch, last completion) of each stage, seconds of run time.
    pub stages: Vec<(f64, f64)>,
    pub timeline: Vec<TimelineSample>,
}

fn four_stage_config(opts: &ElasticityOptions, elastic: bool) -> RunConfig {
    let width = opts.workflow.width;
    let mut e = ExecutorConfig::new("bench", ExecutorKind::Htex);
    e.workers_per_node = Some(1);
    e.provider = Some(ProviderConfig {
        kind: ProviderKind::Sim,
        init_blocks: if elastic { 0 } else { width },
        min_blocks: if elastic { 0 } else { width },
        max_blocks: width,
        queue_delay: opts.queue_delay.as_secs_f64(),
        ..ProviderConfig::default()
    });
    RunConfig {
        executors: vec![e],
        strategy: StrategySection {
            enabled: elastic,
            parallelism: opts.parallelism,
            poll_period: opts.poll_period.as_secs_f64(),
            idle_timeout: opts.idle_timeout.as_secs_f64(),
        },
        ..RunConfig::default()
    }
}

fn run_four_stage(
    env: &BenchEnv,
    opts: &ElasticityOptions,
    elastic: bool,
) -> Result<ElasticRun, RunError> {
    let sink = Arc::new(MemorySink::new());
    let name = if elastic { "elastic" } else { "static" };
    let rt = env.start(name, &four_stage_config(opts, elastic), Some(sink.clone()))?;
    let last = four_stage(&rt.dfk, &opts.workflow)?;
    let _ = last.result();
    rt.dfk.wait_all();
    let tasks = rt.dfk.tasks();
    let log = rt.shutdown();
    let u = compute_utilization(&sink.events())?;
    let w = opts.workflow.width;
    let bounds = [
        (0, w),
        (w, w + 1),
        (w + 1, 2 * w + 1),
        (2 * w + 1, 2 * w + 2),
    ];
    let stages = bounds
        .iter()
        .map(|&(a, b)| {
            let s = &tasks[a..b];
            let start = s
                .iter()
                .filter_map(|t| t.first_launch_time)
                .min()
                .unwrap_or(0);
            let end = s.iter().filter_map(|t| t.complete_time).max().unwrap_or(0);
            (start as f64 / 1e6, end as f64 / 1e6)
        })
        .collect();
    Ok(ElasticRun {
        utilization: u.utilization,
        makespan_s: u.makespan_us as f64 / 1e6,
        stages,
        timeline: log.map(|l| l.timeline("bench")).unwrap_or_default(),
    })
}

/// Runs the four-stage workflow with a static allocation sized for its
/// widest stage, then elastically from zero blocks.
pub fn elasticity(
    env: &BenchEnv,
    opts: &ElasticityOptions,
) -> Result<(BenchReport, ElasticRun, ElasticRun), RunError> {
    let mut report = BenchReport::new("elasticity", "%");
    report.set("width", opts.workflow.width);
    report.set("wide_ms", ms(opts.workflow.wide));
    report.set("reduce_ms", ms(opts.workflow.reduce));
    report.set("parallelism", opts.parallelism);
    report.set("poll_period_s", opts.poll_period.as_secs_f64());
    report.set("idle_timeout_s", opts.idle_timeout.as_secs_f64());
    report.set("queue_delay_s", opts.queue_delay.as_secs_f64());
    let fixed = run_four_stage(env, opts, false)?;
    let elastic = run_four_stage(env, opts, true)?;
    report.samples = vec![fixed.utilization, elastic.utilization];
    report.set("utilization_static", format!("{:.2}", fixed.utilization));
    report.set("utilization_elastic", format!("{:.2}", elastic.utilization));
    report.set("makespan_static_s", format!("{:.3}", fixed.makespan_s));
    report.set("makespan_elastic_s", format!("{:.3}", elastic.makespan_s));
    report.set(
        "makespan_increase_pct",
        format!(
            "{:.2}",
            100.0 * (elastic.makespan_s / fixed.makespan_s - 1.0)
        ),
    );
    for s in &elastic.timeline {
        report.rows.push(row([
            ("t_s", format!("{:.3}", s.timestamp_us as f64 / 1e6)),
            ("outstanding", s.outstanding.to_string()),
            ("active_blocks", s.active_blocks.to_string()),
            ("pending_blocks", s.pending_blocks.to_string()),
        ]));
    }
    Ok((report, fixed, elastic))
}

/// Writes the report's CSV if `path` is given.
pub fn maybe_write(report: &BenchReport, path: Option<&Path>) -> io::Result<()> {
    if let Some(p) = path {
        report.write_csv(p).map_err(io::Error::other)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_samples() {
        let st = Stats::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((st.min, st.max, st.count), (1.0, 4.0, 4));
        assert!((st.mean - 2.5).abs() < 1e-12);
        assert!((st.median - 2.5).abs() < 1e-12);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn line_fit() {
        let (a, b) = least_squares(&[(1.0, 3.0), (2.0, 5.0), (3.0, 7.0)]);
        assert!((a - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_keeps_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = BenchReport::new("latency", "ms");
        r.samples = vec![0.5, 0.7];
        r.set("tasks", 2);
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains(",sample,")).count(), 2);
        assert!(text.contains("latency,param,,tasks,2"));
    }
}
