//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Pass criterion names as arguments to run a subset.

#[allow(dead_code)]
#[path = "../../core/tests/common/dag.rs"]
mod dag;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use pilotflow_cli::bench::{
    self, BenchEnv, BenchExecutor, ElasticityOptions, ScalingMode, ScalingOptions,
    ThroughputOptions,
};
use pilotflow_cli::config::{ExecutorConfig, ExecutorKind, ProviderConfig, RunConfig};
use pilotflow_cli::{RunOptions, Runtime};
use pilotflow_core::agent::AgentCommand;
use pilotflow_core::app::Registry;
use pilotflow_core::checkpoint::{load_checkpoints, read_records};
use pilotflow_core::executor::{ExecutionKernel, InlineExecutor, LocalExecutor};
use pilotflow_core::llex::{LlexConfig, LlexExecutor};
use pilotflow_core::monitor::Monitor;
use pilotflow_core::{Call, DataFlowKernel, EngineConfig, Executor, TaskState, Value};
use rand::{Rng, SeedableRng};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn(&Ctx) -> Verdict);

struct Ctx {
    agent: AgentCommand,
    scratch: tempfile::TempDir,
    reports: PathBuf,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        let d = self.scratch.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn bench_env(&self, name: &str, seed: u64) -> BenchEnv {
        BenchEnv {
            agent: self.agent.clone(),
            work_dir: self.dir(name),
            seed,
        }
    }

    fn save(&self, name: &str, report: &bench::BenchReport) -> PathBuf {
        let path = self.reports.join(format!("{name}.csv"));
        report.write_csv(&path).expect("write report");
        path
    }
}

fn local(label: &str, workers: usize, dir: &Path) -> Arc<dyn Executor> {
    let kernel = ExecutionKernel::new(Arc::new(Registry::with_builtins()), dir.join(label));
    Arc::new(LocalExecutor::new(label, workers, kernel))
}

fn inline(label: &str, dir: &Path) -> Arc<dyn Executor> {
    let kernel = ExecutionKernel::new(Arc::new(Registry::with_builtins()), dir.join(label));
    Arc::new(InlineExecutor::new(label, kernel))
}

fn engine(executors: Vec<Arc<dyn Executor>>, config: EngineConfig) -> DataFlowKernel {
    DataFlowKernel::start(config, executors, Monitor::disabled()).expect("engine starts")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    cond()
}

/// Gone or a zombie awaiting its parent.
fn exited(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            stat.rsplit(')')
                .next()
                .and_then(|s| s.split_whitespace().next())
                == Some("Z")
        }
        Err(_) => true,
    }
}

fn sigkill(pid: u32) {
    let _ = std::process::Command::new("kill")
        .args(["-KILL", &pid.to_string()])
        .status();
}

fn dataflow(ctx: &Ctx) -> Verdict {
    let registry = Registry::with_builtins();
    let dir = ctx.dir("dataflow");
    let t0 = Instant::now();
    let (mut tasks, mut edges, mut failing) = (0, 0, 0);
    for seed in 0..500 {
        let g = dag::random_dag(seed, 200, 5);
        let expected = dag::serial_reference(&g, &registry);
        let dfk = engine(vec![local("pool", 4, &dir)], EngineConfig::default());
        let handles = dag::submit_dag(&dfk, &g);
        dfk.wait_all();
        dag::check_outcomes(&handles, &expected).map_err(|e| format!("seed {seed}: {e}"))?;
        dag::check_edge_order(&dfk.tasks()).map_err(|e| format!("seed {seed}: {e}"))?;
        tasks += g.nodes.len();
        edges += g.edges();
        failing += g.nodes.iter().filter(|n| n.app == "fail").count();
        dfk.shutdown();
    }
    let took = t0.elapsed();
    ensure(took < Duration::from_secs(300), || format!("took {took:?}"))?;
    Ok(format!(
        "500 graphs, {tasks} tasks, {edges} edges, {failing} injected failures, {:.1}s",
        took.as_secs_f64()
    ))
}

fn latency(ctx: &Ctx) -> Verdict {
    let env = ctx.bench_env("latency", 1);
    let t0 = Instant::now();
    let htex = bench::latency(&env, BenchExecutor::Htex, 1000).map_err(|e| e.to_string())?;
    let llex = bench::latency(&env, BenchExecutor::Llex, 1000).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    let (h, l) = (htex.stats().unwrap(), llex.stats().unwrap());
    ctx.save("latency-htex", &htex);
    ctx.save("latency-llex", &llex);
    let detail = format!(
        "median llex {:.3} ms, htex {:.3} ms over {} samples each, {:.1}s",
        l.median,
        h.median,
        l.count,
        took.as_secs_f64()
    );
    ensure(
        htex.param("failed") == Some(0.0) && llex.param("failed") == Some(0.0),
        || format!("failed round trips; {detail}"),
    )?;
    ensure(l.median < h.median, || format!("llex not faster; {detail}"))?;
    ensure(l.median <= 10.0, || format!("llex above 10 ms; {detail}"))?;
    ensure(took < Duration::from_secs(120), || {
        format!("too slow; {detail}")
    })?;
    Ok(detail)
}

fn throughput(ctx: &Ctx) -> Verdict {
    let env = ctx.bench_env("throughput", 2);
    let opts = ThroughputOptions {
        tasks: 20_000,
        workers: 16,
        task_ms: 0.0,
        prefetch: 0,
    };
    let t0 = Instant::now();
    let report = bench::throughput(&env, BenchExecutor::Htex, opts).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    let path = ctx.save("throughput", &report);
    let rate = report.param("throughput").unwrap_or(0.0);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!(
        "{rate:.0} tasks/s, {} samples in {}, {cores} cores, {:.1}s",
        report.samples.len(),
        path.display(),
        took.as_secs_f64()
    );
    ensure(report.param("failed") == Some(0.0), || {
        format!("failed tasks; {detail}")
    })?;
    ensure(report.samples.len() == opts.tasks, || {
        format!("missing samples; {detail}")
    })?;
    ensure(rate >= 500.0, || format!("below 500 tasks/s; {detail}"))?;
    ensure(took < Duration::from_secs(180), || {
        format!("too slow; {detail}")
    })?;
    Ok(detail)
}

fn strong_scaling(ctx: &Ctx) -> Verdict {
    let env = ctx.bench_env("scaling", 3);
    let n = 64;
    let opts = ScalingOptions {
        mode: ScalingMode::Strong,
        durations_ms: vec![0, 1000],
        workers: vec![8, 16, 32],
        tasks: n,
    };
    let report = bench::scaling(&env, &opts).map_err(|e| e.to_string())?;
    ctx.save("scaling", &report);
    let get = |w: usize, d: u64| {
        report
            .rows
            .iter()
            .find(|r| r["workers"] == w.to_string() && r["duration_ms"] == d.to_string())
            .map(|r| {
                (
                    r["completion_s"].parse::<f64>().unwrap(),
                    r["failed"] == "0",
                )
            })
    };
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for w in [8, 16, 32] {
        let (overhead, ok0) = get(w, 0).ok_or("missing row")?;
        let (took, ok1) = get(w, 1000).ok_or("missing row")?;
        ensure(ok0 && ok1, || format!("W={w}: failed tasks"))?;
        let model = n as f64 * 1.0 / w as f64 + overhead;
        let err = (took - model).abs() / model;
        worst = worst.max(err);
        parts.push(format!("W={w} {took:.2}s vs {model:.2}s"));
    }
    let detail = format!(
        "{}; worst deviation {:.1}%",
        parts.join(", "),
        100.0 * worst
    );
    ensure(worst <= 0.15, || detail.clone())?;
    Ok(detail)
}

fn elasticity(ctx: &Ctx) -> Verdict {
    let env = ctx.bench_env("elasticity", 4);
    let opts = ElasticityOptions::default();
    let (report, fixed, elastic) = bench::elasticity(&env, &opts).map_err(|e| e.to_string())?;
    ctx.save("elasticity", &report);
    let increase = 100.0 * (elastic.makespan_s / fixed.makespan_s - 1.0);
    let width = opts.workflow.width;
    let in_window = |(a, b): (f64, f64)| {
        elastic
            .timeline
            .iter()
            .filter(move |s| {
                let t = s.timestamp_us as f64 / 1e6;
                t >= a && t <= b
            })
            .map(|s| s.active_blocks)
    };
    let peak = |i: usize| in_window(elastic.stages[i]).max().unwrap_or(0);
    let trough = |i: usize| in_window(elastic.stages[i]).min().unwrap_or(usize::MAX);
    let shape = format!(
        "blocks peak {}/{} in wide stages, trough {}/{} in reduce stages",
        peak(0),
        peak(2),
        trough(1),
        trough(3)
    );
    let detail = format!(
        "static {:.1}%, elastic {:.1}%, makespan {:.2}s -> {:.2}s (+{increase:.1}%), {shape}",
        fixed.utilization, elastic.utilization, fixed.makespan_s, elastic.makespan_s
    );
    ensure((fixed.utilization - 68.0).abs() <= 5.0, || {
        format!("static off target; {detail}")
    })?;
    ensure((elastic.utilization - 84.0).abs() <= 5.0, || {
        format!("elastic off target; {detail}")
    })?;
    ensure(increase <= 15.0, || {
        format!("makespan grew too much; {detail}")
    })?;
    let rises = peak(0) >= width && peak(2) >= width;
    let falls = trough(1) < peak(0)
        && trough(3) < peak(2)
        && trough(1) <= width / 4
        && trough(3) <= width / 4;
    ensure(rises && falls, || format!("timeline shape; {detail}"))?;
    Ok(detail)
}

fn htex_runtime(ctx: &Ctx, name: &str, blocks: usize, prefetch: usize) -> Result<Runtime, String> {
    let mut e = ExecutorConfig::new("ft", ExecutorKind::Htex);
    e.workers_per_node = Some(1);
    e.prefetch_capacity = Some(prefetch);
    e.heartbeat_period = Some(0.5);
    e.heartbeat_threshold = Some(2.0);
    e.provider = Some(ProviderConfig {
        init_blocks: blocks,
        max_blocks: blocks,
        ..ProviderConfig::default()
    });
    let cfg = RunConfig {
        retries: 1,
        executors: vec![e],
        ..RunConfig::default()
    };
    let rt = Runtime::start(&cfg, &RunOptions::new(ctx.agent.clone(), ctx.dir(name)))
        .map_err(|e| e.to_string())?;
    ensure(rt.wait_for_workers(Duration::from_secs(30)), || {
        "managers never registered".into()
    })?;
    Ok(rt)
}

fn fault_tolerance(ctx: &Ctx) -> Verdict {
    let (period, threshold) = (Duration::from_millis(500), Duration::from_secs(2));

    // Two managers holding eight tasks each; one is killed.
    let rt = htex_runtime(ctx, "ft-manager", 2, 7)?;
    let exec = rt.htex[0].clone();
    let sleep = rt.dfk.app("sleep").map_err(|e| e.to_string())?;
    let futures: Vec<_> = (0..16)
        .map(|_| rt.dfk.submit(Call::new(sleep.clone()).arg(Value::Int(300))))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let loaded = wait_until(Duration::from_secs(5), || {
        exec.outstanding()
            .is_ok_and(|o| o.len() == 2 && o.values().all(|n| *n == 8))
    });
    ensure(loaded, || {
        format!("managers not loaded: {:?}", exec.outstanding())
    })?;
    let (victim, pid) = exec.manager_pids().into_iter().next().ok_or("no manager")?;
    let k = exec
        .outstanding()
        .map_err(|e| e.to_string())?
        .get(&victim)
        .copied()
        .unwrap_or(0);
    let killed = Instant::now();
    sigkill(pid);
    let deadline = threshold + Duration::from_secs(10);
    let mut ok = 0;
    for f in &futures {
        let left = deadline.saturating_sub(killed.elapsed());
        if matches!(f.result_timeout(left), Some(Ok(_))) {
            ok += 1;
        }
    }
    let recovered = killed.elapsed();
    let relaunched = rt.dfk.tasks().iter().filter(|t| t.launches == 2).count();
    rt.shutdown();
    ensure(k <= 8 && k > 0, || format!("victim held {k} tasks"))?;
    ensure(ok == futures.len() && recovered <= deadline, || {
        format!("{ok}/{} succeeded after {recovered:?}", futures.len())
    })?;

    // The interchange dies; the manager must notice on its own.
    let rt = htex_runtime(ctx, "ft-interchange", 1, 0)?;
    let exec = rt.htex[0].clone();
    let pids: Vec<u32> = exec.manager_pids().into_values().collect();
    let ix = exec.interchange_pid().ok_or("no interchange")?;
    let killed = Instant::now();
    sigkill(ix);
    let bound = threshold + period;
    let gone = wait_until(bound + Duration::from_secs(5), || {
        pids.iter().all(|p| exited(*p))
    });
    let exit_after = killed.elapsed();
    rt.shutdown();
    let detail = format!(
        "manager with {k} tasks killed: {ok}/16 succeeded in {:.2}s ({relaunched} relaunched); \
         interchange killed: managers exited in {:.2}s (bound {:.1}s)",
        recovered.as_secs_f64(),
        exit_after.as_secs_f64(),
        bound.as_secs_f64()
    );
    ensure(gone && exit_after <= bound, || detail.clone())?;
    Ok(detail)
}

fn checkpointing(ctx: &Ctx) -> Verdict {
    let dir = ctx.dir("checkpoint");
    let ckpt = dir.join("run.ckpt");
    let run = |config: EngineConfig| {
        let dfk = engine(vec![local("pool", 2, &dir)], config);
        let futures: Vec<_> = (0..100i64)
            .map(|i| {
                dfk.submit(Call::new(dfk.app("mix").unwrap()).arg(i).arg(13i64))
                    .unwrap()
            })
            .collect();
        let results: Vec<_> = futures.iter().map(|f| f.result()).collect();
        let submissions = dfk.total_submissions();
        dfk.shutdown();
        (results, submissions)
    };
    let memo = |files: Vec<PathBuf>, path: Option<PathBuf>| EngineConfig {
        memoize: true,
        checkpoint_files: files,
        checkpoint_path: path,
        ..EngineConfig::default()
    };
    let (first, n1) = run(memo(vec![], Some(ckpt.clone())));
    ensure(first.iter().all(Result::is_ok) && n1 == 100, || {
        format!("first run: {n1} submissions")
    })?;
    let (second, n2) = run(memo(vec![ckpt.clone()], None));
    ensure(n2 == 0, || format!("rerun made {n2} submissions"))?;
    ensure(first == second, || "rerun results differ".into())?;

    let bytes = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    let cut = dir.join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).map_err(|e| e.to_string())?;
    let complete = read_records(&cut).map_err(|e| e.to_string())?.len();
    let table = load_checkpoints(&[&cut]).map_err(|e| e.to_string())?;
    let (third, n3) = run(memo(vec![cut], None));
    let detail = format!(
        "rerun: {n2} submissions, identical results; truncated file: {complete} records, {} loaded, rerun submitted {n3}",
        table.len()
    );
    ensure(
        complete == 99 && table.len() == 99 && n3 == 1 && third == first,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn fairness(ctx: &Ctx) -> Verdict {
    let seed = 20_231_119;
    let dir = ctx.dir("fairness");
    let dfk = engine(
        vec![inline("a", &dir), inline("b", &dir)],
        EngineConfig {
            seed,
            ..EngineConfig::default()
        },
    );
    let noop = dfk.app("noop").map_err(|e| e.to_string())?;
    for _ in 0..10_000 {
        dfk.submit(Call::new(noop.clone()))
            .map_err(|e| e.to_string())?;
    }
    dfk.wait_all();
    let subs = dfk.submissions();
    dfk.shutdown();
    let expected = 5000.0;
    let stat: f64 = subs
        .values()
        .map(|n| (*n as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(stat);
    let detail = format!("seed {seed}: counts {subs:?}, chi2 {stat:.3}, p {p:.3}");
    ensure(subs.values().sum::<u64>() == 10_000 && p > 0.01, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn llex(ctx: &Ctx) -> Verdict {
    let dir = ctx.dir("llex");
    let identity_run = |exec: Arc<LlexExecutor>| {
        let dfk = engine(
            vec![exec.clone() as Arc<dyn Executor>],
            EngineConfig::default(),
        );
        let futures: Vec<_> = (0..100i64)
            .map(|i| dfk.call("identity", vec![Value::Int(i)]).unwrap())
            .collect();
        let ok = futures
            .iter()
            .enumerate()
            .filter(|(i, f)| {
                f.result_timeout(Duration::from_secs(30)) == Some(Ok(Value::Int(*i as i64)))
            })
            .count();
        dfk.wait_all();
        let single = dfk
            .tasks()
            .iter()
            .all(|t| t.launches == 1 && t.state == TaskState::Succeeded);
        let info = exec.relay_info();
        dfk.shutdown();
        (ok, single, info)
    };

    let mut plain = LlexConfig::new("plain", ctx.agent.clone());
    plain.workers = 4;
    plain.sandbox_root = dir.join("plain");
    let (ok, _, info) = identity_run(Arc::new(LlexExecutor::new(plain)));
    let info = info.map_err(|e| e.to_string())?;
    ensure(
        ok == 100 && info.tracked_tasks == 0 && info.buffered == 0,
        || format!("{ok}/100 succeeded, relay {info:?}"),
    )?;

    let mut repl = LlexConfig::new("repl", ctx.agent.clone());
    repl.workers = 1;
    repl.drop_workers = 1;
    repl.replication_factor = 2;
    repl.sandbox_root = dir.join("repl");
    let exec = Arc::new(LlexExecutor::new(repl));
    let (ok2, single, info2) = identity_run(exec.clone());
    let stats = exec.stats();
    let surfaced = stats.results - stats.duplicates;
    let detail = format!(
        "relay retained {} tasks after 100; replicated with a dropping worker: {ok2}/100 ok, \
         {surfaced} surfaced of {} answers, {} frames",
        info.tracked_tasks, stats.results, stats.frames_sent
    );
    ensure(ok2 == 100 && single && surfaced == 100, || detail.clone())?;
    ensure(info2.is_ok_and(|i| i.tracked_tasks == 0), || detail.clone())?;
    Ok(detail)
}

fn bookkeeping(ctx: &Ctx) -> Verdict {
    let dir = ctx.dir("bookkeeping");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut points = Vec::new();
    for n in [1_000usize, 10_000, 100_000] {
        for _ in 0..2 {
            let dfk = engine(vec![inline("inline", &dir)], EngineConfig::default());
            let noop = dfk.app("noop").map_err(|e| e.to_string())?;
            let mut handles = Vec::with_capacity(n);
            let mut edges = 0;
            for i in 0..n {
                let deps: Vec<Value> = match i {
                    0 => vec![],
                    1 => vec![&handles[0]],
                    _ => vec![&handles[i - 1], &handles[rng.gen_range(0..i - 1)]],
                }
                .into_iter()
                .map(|h: &pilotflow_core::FutureHandle| h.as_arg())
                .collect();
                edges += deps.len();
                let f = dfk
                    .submit(Call::new(noop.clone()).args(deps))
                    .map_err(|e| e.to_string())?;
                handles.push(f);
            }
            let summary = dfk.wait_all();
            ensure(summary.succeeded == n as u64, || {
                format!("n={n}: {summary:?}")
            })?;
            points.push(((n + edges) as f64, dfk.loop_busy().as_secs_f64()));
            dfk.shutdown();
        }
    }
    let (a, b) = bench::least_squares(&points);
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_res: f64 = points.iter().map(|(x, y)| (y - (a * x + b)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - mean).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let detail = format!(
        "{:.2} us per node+edge, R^2 {r2:.4} over {}",
        a * 1e6,
        points
            .iter()
            .map(|(x, y)| format!("{x:.0}:{:.3}s", y))
            .collect::<Vec<_>>()
            .join(" ")
    );
    ensure(r2 >= 0.98, || detail.clone())?;
    Ok(detail)
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("dataflow_correctness", dataflow),
        ("latency_ordering", latency),
        ("throughput", throughput),
        ("strong_scaling", strong_scaling),
        ("elasticity", elasticity),
        ("fault_tolerance", fault_tolerance),
        ("checkpointing", checkpointing),
        ("selection_fairness", fairness),
        ("llex_stateless_replication", llex),
        ("linear_bookkeeping", bookkeeping),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let reports = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&reports).expect("report directory");
    let ctx = Ctx {
        agent: AgentCommand::new(env!("CARGO_BIN_EXE_pilotflow")).with_args(&["agent"]),
        scratch: tempfile::tempdir().expect("scratch directory"),
        reports,
    };
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&ctx)))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
