use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fedhpo::analysis::{
    load_study_config, run_study, write_summaries, write_trial_log, TableConfig,
};
use fedhpo::backends::{fit_surrogate, generate_table, LookupTable, Mode};
use fedhpo::optimizers::{run_any, OptimizerKind, OptimizerSpec};
use fedhpo::rng;

/// Benchmark hyperparameter optimizers on simulated federated learning.
#[derive(Parser)]
#[command(name = "fedhpo", version)]
struct Cli {
    /// Worker threads for table rows and study cells (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every grid configuration of a task and write a lookup table.
    GenTable {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue a partially written table instead of refusing to touch it.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the random-forest surrogate of a lookup table.
    FitSurrogate {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one optimizer on the first task and algorithm of a study config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Optimizer name from the config, or an optimizer kind.
        #[arg(long)]
        optimizer: String,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Trial log (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full study and write its report.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the summary CSVs of a finished study.
    Report {
        #[arg(long)]
        study_dir: PathBuf,
    },
}

fn base_dir(config: &Path) -> PathBuf {
    config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn gen_table(config: &Path, out: &Path, resume: bool) -> Result<()> {
    let cfg = TableConfig::load(config)?;
    if out.exists() && !resume {
        bail!("{} already exists; pass --resume to continue it", out.display());
    }
    let space = cfg.space()?;
    let data = cfg.task.build(&base_dir(config))?;
    let total = fedhpo::space::grid(&space).len() * cfg.table.n_fidelities();
    eprintln!("{}: {total} rows to fill", out.display());
    let build = generate_table(&data, &cfg.task.name, cfg.algorithm, &space, &cfg.table, out)?;
    eprintln!(
        "{}: {}/{total} rows, {} courses run",
        out.display(),
        build.table.len(),
        build.courses_run
    );
    Ok(())
}

fn fit(table: &Path, out: &Path) -> Result<()> {
    let table = LookupTable::load(table)?;
    let fit = fit_surrogate(&table, 0)?;
    fit.surrogate.save(out)?;
    println!(
        "n_trees={} max_depth={} cv_mae={}",
        fit.surrogate.n_trees, fit.surrogate.max_depth, fit.cv_mae
    );
    Ok(())
}

fn run(config: &Path, optimizer: &str, mode: Option<Mode>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_study_config(config)?;
    let spec = match cfg.optimizers.iter().find(|o| o.display_name() == optimizer) {
        Some(s) => s.clone(),
        None => match optimizer.parse::<OptimizerKind>() {
            Ok(kind) => OptimizerSpec::new(kind),
            Err(_) => {
                let kinds: Vec<&str> = OptimizerKind::ALL.iter().map(|k| k.as_str()).collect();
                bail!("unknown optimizer '{optimizer}'; valid kinds: {}", kinds.join(", "));
            }
        },
    };
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.optimizers = vec![spec.clone()];
    let base = base_dir(config);
    cfg.validate(&base)?;
    let handle = cfg.benchmark(&base, &cfg.tasks[0], cfg.algorithms[0])?;
    let seed = rng::mix_all(seed.unwrap_or(cfg.seed), &[0]);
    let result = run_any(&spec, &handle, cfg.budget_seconds, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_trial_log(out, &result.trials)?;
    let best = fedhpo::optimizers::incumbent(&result.trials).map(|i| result.trials[i].loss());
    println!(
        "{} trials; incumbent validation loss {}",
        result.trials.len(),
        best.map_or("none".to_string(), |l| l.to_string())
    );
    Ok(())
}

fn study(config: &Path, out: &Path, jobs: Option<usize>) -> Result<bool> {
    let cfg = load_study_config(config)?;
    let outcome = run_study(&cfg, &base_dir(config), out, jobs)?;
    for f in &outcome.failures {
        eprintln!("failed: {f}");
    }
    println!(
        "{} cells, {} failed; report in {}",
        outcome.n_cells,
        outcome.failures.len(),
        out.display()
    );
    Ok(outcome.failures.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let res = match &cli.command {
        Command::GenTable { config, out, resume } => gen_table(config, out, *resume).map(|_| true),
        Command::FitSurrogate { table, out } => fit(table, out).map(|_| true),
        Command::Run {
            config,
            optimizer,
            mode,
            seed,
            out,
        } => run(config, optimizer, *mode, *seed, out).map(|_| true),
        Command::Study { config, out } => study(config, out, cli.jobs),
        Command::Report { study_dir } => write_summaries(study_dir).map(|_| true).map_err(Into::into),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
