//! `moo`: generate instances, run the two-stage pipeline and the experiments.
//!
//! Precedence of settings: command-line flags, then the `--config` file, then
//! built-in defaults.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use moo_core::dag::split::TimingMode;
use moo_core::dag::RootPolicy;
use moo_core::variance::Estimator;

use commands::{InstanceKind, PlotKind};
use config::Config;
use error::{CliError, EXIT_INPUT};
use output::RunOutput;

#[derive(Parser)]
#[command(name = "moo", version, about = "Two-stage dual solver for constrained multi-objective serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: out/<command>).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for repetitions and per-user recovery.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = parse_estimator)]
    estimator: Option<Estimator>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    eps_abs: Option<f64>,
    #[arg(long, global = true)]
    eps_rel: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    s.parse().map_err(|e: moo_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic instance file.
    Gen {
        #[arg(long, value_enum)]
        kind: InstanceKind,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        /// Levels of the binary tree.
        #[arg(long)]
        levels: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1 and Stage 2 end to end: duals and serving plans.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        /// Solve Stage 1 on this many sampled users.
        #[arg(long)]
        sample_size: Option<usize>,
        /// Record a residual trace every this many iterations.
        #[arg(long)]
        trace_every: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2 only, from budget multipliers in a duals CSV.
    Recover {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        duals: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Build the constraint DAG from an instance's budgets, a JSON list of
    /// index sets, or a binary tree.
    Dag {
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        sets: Option<PathBuf>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, value_enum)]
        root: Option<RootArg>,
        #[command(flatten)]
        common: Common,
    },
    /// MSE against online time when splitting a binary tree at each level.
    SplitCurve {
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_enum)]
        timing: Option<TimingArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Mean and variance of the sampled duals under each estimator.
    VarianceTable {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Check an instance file and report every problem found.
    Validate {
        #[arg(long)]
        instance: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a gnuplot script for an experiment CSV.
    PlotScript {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RootArg {
    AddUnion,
    None,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TimingArg {
    Model,
    Wall,
}

fn resolve(common: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    if common.estimator.is_some() {
        cfg.pipeline.estimator = common.estimator;
    }
    let solver = &mut cfg.solver;
    if let Some(v) = common.rho {
        solver.rho = v;
    }
    if let Some(v) = common.eps_abs {
        solver.eps_abs = v;
    }
    if let Some(v) = common.eps_rel {
        solver.eps_rel = v;
    }
    if let Some(v) = common.max_iters {
        solver.max_iters = v;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Gen { common, .. } => ("gen", common),
        Command::Solve { common, .. } => ("solve", common),
        Command::Recover { common, .. } => ("recover", common),
        Command::Dag { common, .. } => ("dag", common),
        Command::SplitCurve { common, .. } => ("split-curve", common),
        Command::VarianceTable { common, .. } => ("variance-table", common),
        Command::Validate { common, .. } => ("validate", common),
        Command::PlotScript { common, .. } => ("plot-script", common),
    };
    let mut cfg = resolve(common)?;

    match &cli.command {
        Command::Gen { users, items, levels, .. } => {
            if let Some(n) = users {
                cfg.gen.uniform.users = *n;
                cfg.gen.spike.users = *n;
            }
            if let Some(m) = items {
                cfg.gen.uniform.items = *m;
                cfg.gen.spike.items = *m;
                cfg.gen.tree.items = *m;
            }
            if let Some(k) = levels {
                cfg.gen.tree.levels = *k;
            }
        }
        Command::Solve { sample_size, trace_every, .. } => {
            if sample_size.is_some() {
                cfg.pipeline.sample_size = *sample_size;
            }
            if trace_every.is_some() {
                cfg.solver.trace_every = *trace_every;
            }
        }
        Command::Dag { root, .. } => {
            if let Some(r) = root {
                cfg.dag.root = match r {
                    RootArg::AddUnion => RootPolicy::AddUnion,
                    RootArg::None => RootPolicy::None,
                };
            }
        }
        Command::SplitCurve { levels, reps, w, beta, timing, .. } => {
            let s = &mut cfg.split;
            if let Some(k) = levels {
                s.tree.levels = *k;
            }
            if let Some(r) = reps {
                s.reps = *r;
            }
            if let Some(v) = w {
                s.w = *v;
            }
            if let Some(v) = beta {
                s.beta = *v;
            }
            if let Some(t) = timing {
                s.timing = match t {
                    TimingArg::Model => TimingMode::Model,
                    TimingArg::Wall => TimingMode::Wall,
                };
            }
        }
        Command::VarianceTable { n, reps, population, .. } => {
            if let Some(v) = n {
                cfg.variance.n = *v;
            }
            if let Some(v) = reps {
                cfg.variance.reps = *v;
            }
            if let Some(v) = population {
                cfg.variance.population.population = *v;
            }
        }
        _ => {}
    }
    cfg.solver.check()?;

    let threads = cfg.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::internal(format!("thread pool: {}", e)))?;
    let threads = rayon::current_num_threads();

    if let Command::Validate { instance, .. } = &cli.command {
        let (ok, report) = commands::validate(instance)?;
        if ok {
            println!("{}: ok", instance.display());
            return Ok(());
        }
        return Err(CliError::input(format!("{} is invalid:\n{}", instance.display(), report.trim_end())));
    }

    let dir = common
        .out_dir
        .clone()
        .unwrap_or_else(|| commands::default_out_dir(name));
    let mut out = RunOutput::create(&dir, name, cfg.hash(), cfg.seed, threads)?;
    let diagnostics = match &cli.command {
        Command::Gen { kind, .. } => commands::gen(*kind, &cfg, &mut out)?,
        Command::Solve { instance, .. } => commands::solve(instance, &cfg, &mut out)?,
        Command::Recover { instance, duals, .. } => commands::recover(instance, duals, &mut out)?,
        Command::Dag { instance, sets, levels, .. } => {
            commands::dag(instance.as_deref(), sets.as_deref(), *levels, &cfg, &mut out)?
        }
        Command::SplitCurve { .. } => commands::split_curve(&cfg, &mut out)?,
        Command::VarianceTable { .. } => commands::variance_table(&cfg, &mut out)?,
        Command::PlotScript { kind, csv, .. } => {
            if !csv.exists() {
                return Err(CliError::input(format!("no such file: {}", csv.display())));
            }
            let name = match kind {
                PlotKind::SplitCurve => "split_curve.gp",
                PlotKind::VarianceTable => "variance_table.gp",
            };
            let path = out.write_text(name, &commands::plot_script(*kind, csv))?;
            println!("{}", path.display());
            serde_json::json!({ "csv": csv.display().to_string() })
        }
        Command::Validate { .. } => unreachable!("handled above"),
    };
    let mut diagnostics = diagnostics;
    diagnostics["config"] = serde_json::to_value(&cfg).map_err(|e| CliError::internal(e.to_string()))?;
    out.finish(diagnostics)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.code);
    }
}
