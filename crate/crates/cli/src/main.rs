use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use pilotflow_cli::bench::{
    self, BenchEnv, BenchExecutor, BenchReport, ElasticityOptions, ScalingMode, ScalingOptions,
    ThroughputOptions,
};
use pilotflow_cli::programs::{FourStage, Program};
use pilotflow_cli::runtime::{default_agent, work_dir};
use pilotflow_cli::{ConfigError, RunConfig, RunError, RunOptions, Runtime};
use pilotflow_core::agent::{self, AgentCli, AgentSubcommand};
use pilotflow_core::elasticity::StrategyConfig;

// Output to a closed pipe is dropped rather than panicking.
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! err {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stderr(), $($t)*);
    }};
}

const EXIT_TASK_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "pilotflow",
    version,
    about = "Run dataflow programs and benchmarks"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the monitor log here.
    #[arg(long, global = true)]
    monitor_log: Option<PathBuf>,
    /// Write the report as CSV here.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Scratch directory for sandboxes and staging.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a built-in program (hello, diamond, four-stage) or a task-list file.
    Run {
        /// `[CONFIG] PROGRAM`
        #[arg(num_args = 1..=2, required = true)]
        args: Vec<String>,
    },
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Summarize a monitor log.
    Report { log: PathBuf },
    #[command(hide = true)]
    Agent {
        #[command(subcommand)]
        command: AgentSubcommand,
    },
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Sequential no-op round trips.
    Latency {
        #[arg(long, value_enum, default_value = "htex")]
        executor: BenchExecutor,
        #[arg(long, default_value_t = 1000)]
        tasks: usize,
    },
    /// Tasks per second for a bag of tasks submitted at once.
    Throughput {
        #[arg(long, value_enum, default_value = "htex")]
        executor: BenchExecutor,
        #[arg(long, default_value_t = 50_000)]
        tasks: usize,
        #[arg(long, default_value_t = 16)]
        workers: usize,
        #[arg(long, default_value_t = 0.0)]
        task_ms: f64,
        #[arg(long, default_value_t = 0)]
        prefetch: usize,
    },
    /// Completion time against worker count.
    Scaling {
        #[arg(long, value_enum, default_value = "strong")]
        mode: ScalingMode,
        #[arg(long, value_delimiter = ',', default_value = "0,10,100,1000")]
        durations: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        tasks: usize,
    },
    /// Four-stage workflow with and without elastic scaling.
    Elasticity {
        #[arg(long, default_value_t = 20)]
        width: usize,
        #[arg(long, default_value_t = 2000)]
        wide_ms: u64,
        #[arg(long, default_value_t = 1000)]
        reduce_ms: u64,
        #[arg(long, default_value_t = 1.0)]
        parallelism: f64,
        #[arg(long, default_value_t = 0.05)]
        poll_period: f64,
        #[arg(long, default_value_t = 0.3)]
        idle_timeout: f64,
        #[arg(long, default_value_t = 0.1)]
        queue_delay: f64,
    },
}

fn init_tracing() {
    // Same filter variable as the agents.
    agent::init_tracing();
}

fn load_config(cli: &Cli, explicit: Option<&str>) -> Result<RunConfig, ConfigError> {
    match explicit.map(PathBuf::from).or_else(|| cli.config.clone()) {
        Some(p) => RunConfig::load(&p),
        None => Ok(RunConfig::default()),
    }
}

fn run_program(cli: &Cli, args: &[String]) -> Result<u8, RunError> {
    let (config, program) = match args {
        [c, p] => (Some(c.as_str()), p.as_str()),
        [p] => (None, p.as_str()),
        _ => unreachable!("clap enforces 1..=2 arguments"),
    };
    let cfg = load_config(cli, config)?;
    let mut opts = RunOptions::new(default_agent()?, work_dir(cli.work_dir.as_deref()));
    opts.seed = cli.seed;
    opts.monitor_log = cli.monitor_log.clone();
    let rt = Runtime::start(&cfg, &opts)?;
    rt.wait_for_workers(Duration::from_secs(60));
    let futures = match Program::parse(program).submit(&rt.dfk) {
        Ok(f) => f,
        Err(e) => {
            err!("error: {e}");
            rt.shutdown();
            return Ok(EXIT_CONFIG);
        }
    };
    let mut failed = false;
    for f in &futures {
        match f.result() {
            Ok(v) => out!("{v}"),
            Err(e) => {
                failed = true;
                err!("task {} failed: {e}", f.task_id());
            }
        }
    }
    let summary = rt.dfk.wait_all();
    rt.shutdown();
    Ok(if failed || summary.failed > 0 {
        EXIT_TASK_FAILURE
    } else {
        0
    })
}

fn bench_env(cli: &Cli) -> Result<BenchEnv, RunError> {
    let seed = match (cli.seed, &cli.config) {
        (Some(s), _) => s,
        (None, Some(p)) => RunConfig::load(p)?.seed,
        (None, None) => 0,
    };
    Ok(BenchEnv {
        agent: default_agent()?,
        work_dir: work_dir(cli.work_dir.as_deref()),
        seed,
    })
}

fn run_bench(cli: &Cli, cmd: &BenchCommand) -> Result<BenchReport, RunError> {
    let env = bench_env(cli)?;
    match cmd {
        BenchCommand::Latency { executor, tasks } => bench::latency(&env, *executor, *tasks),
        BenchCommand::Throughput {
            executor,
            tasks,
            workers,
            task_ms,
            prefetch,
        } => bench::throughput(
            &env,
            *executor,
            ThroughputOptions {
                tasks: *tasks,
                workers: *workers,
                task_ms: *task_ms,
                prefetch: *prefetch,
            },
        ),
        BenchCommand::Scaling {
            mode,
            durations,
            workers,
            tasks,
        } => bench::scaling(
            &env,
            &ScalingOptions {
                mode: *mode,
                durations_ms: durations.clone(),
                workers: workers.clone(),
                tasks: *tasks,
            },
        ),
        BenchCommand::Elasticity {
            width,
            wide_ms,
            reduce_ms,
            parallelism,
            poll_period,
            idle_timeout,
            queue_delay,
        } => {
            let check = StrategyConfig {
                parallelism: *parallelism,
                ..StrategyConfig::default()
            };
            if let Err(e) = check.validate() {
                return Err(RunError::Config(ConfigError::Invalid {
                    field: "parallelism".into(),
                    reason: e.to_string(),
                }));
            }
            let secs = |s: f64, field: &str| {
                Duration::try_from_secs_f64(s).map_err(|_| {
                    RunError::Config(ConfigError::Invalid {
                        field: field.into(),
                        reason: format!("not a duration: {s}"),
                    })
                })
            };
            let opts = ElasticityOptions {
                workflow: FourStage {
                    width: *width,
                    wide: Duration::from_millis(*wide_ms),
                    reduce: Duration::from_millis(*reduce_ms),
                },
                parallelism: *parallelism,
                poll_period: secs(*poll_period, "poll_period")?,
                idle_timeout: secs(*idle_timeout, "idle_timeout")?,
                queue_delay: secs(*queue_delay, "queue_delay")?,
            };
            bench::elasticity(&env, &opts).map(|(r, _, _)| r)
        }
    }
}

fn exit_for(e: &RunError) -> u8 {
    match e {
        RunError::Config(_) => EXIT_CONFIG,
        _ => EXIT_TASK_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Agent { command } = cli.command {
        agent::init_tracing();
        return ExitCode::from(agent::run(AgentCli { command }) as u8);
    }
    init_tracing();
    let code = match &cli.command {
        Command::Run { args } => run_program(&cli, args).unwrap_or_else(|e| {
            err!("error: {e}");
            exit_for(&e)
        }),
        Command::Bench(cmd) => match run_bench(&cli, cmd) {
            Ok(report) => {
                out!("{}", report.to_text().trim_end());
                match bench::maybe_write(&report, cli.output.as_deref()) {
                    Ok(()) => 0,
                    Err(e) => {
                        err!("error: cannot write report: {e}");
                        EXIT_TASK_FAILURE
                    }
                }
            }
            Err(e) => {
                err!("error: {e}");
                exit_for(&e)
            }
        },
        Command::Report { log } => match pilotflow_cli::report::summarize(log) {
            Ok(report) => {
                out!("{}", report.to_text().trim_end());
                match bench::maybe_write(&report, cli.output.as_deref()) {
                    Ok(()) => 0,
                    Err(e) => {
                        err!("error: cannot write report: {e}");
                        EXIT_TASK_FAILURE
                    }
                }
            }
            Err(e) => {
                err!("error: {e}");
                EXIT_TASK_FAILURE
            }
        },
        Command::Agent { .. } => unreachable!("handled above"),
    };
    ExitCode::from(code)
}
