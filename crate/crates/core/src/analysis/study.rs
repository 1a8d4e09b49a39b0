//! Study configuration, execution and report files.
//!
//! A study runs every (task, algorithm, optimizer, repetition) cell, writes
//! one trial log per cell and then derives the summary CSVs from the files
//! on disk, so `write_summaries` alone regenerates the report.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{best_seen, ecdf, mean_rank, sign_test, time_grid};
use crate::backends::{fit_surrogate, generate_table, BenchmarkHandle, Mode, Surrogate, TableSpec};
use crate::dataflow::{federate, load_csv, synth_blobs, FederatedDataset, DEFAULT_ALPHA, DEFAULT_CLIENTS};
use crate::error::{Error, Result};
use crate::fedex::{Policy, PolicySnapshot};
use crate::optimizers::{run_any, OptimizerSpec, RunOutput, Trial};
use crate::rng;
use crate::space::{builtin_space, Algorithm, Family, FidelitySpace, HyperConfig, SearchSpace};
use crate::sysmodel::SystemConfig;

pub const SCHEMA_VERSION: u32 = 1;
const GRID_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSource {
    /// Gaussian blobs from `synth_blobs`.
    Synthetic,
    /// A CSV file with a label column.
    Csv,
}

fn d_label() -> String {
    "label".into()
}
fn d_samples() -> usize {
    600
}
fn d_features() -> usize {
    5
}
fn d_classes() -> usize {
    3
}
fn d_spread() -> f64 {
    1.0
}
fn d_clients() -> usize {
    DEFAULT_CLIENTS
}
fn d_alpha() -> f64 {
    DEFAULT_ALPHA
}

/// A dataset and how it is split over clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub source: TaskSource,
    /// CSV file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "d_label")]
    pub label: String,
    #[serde(default = "d_samples")]
    pub n_samples: usize,
    #[serde(default = "d_features")]
    pub n_features: usize,
    #[serde(default = "d_classes")]
    pub n_classes: usize,
    #[serde(default = "d_spread")]
    pub spread: f64,
    #[serde(default = "d_clients")]
    pub n_clients: usize,
    /// Dirichlet concentration of the label-skew split.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn synthetic(name: &str, seed: u64) -> Self {
        TaskSpec {
            name: name.into(),
            source: TaskSource::Synthetic,
            path: None,
            label: d_label(),
            n_samples: d_samples(),
            n_features: d_features(),
            n_classes: d_classes(),
            spread: d_spread(),
            n_clients: d_clients(),
            alpha: d_alpha(),
            seed,
        }
    }

    fn csv_path(&self, base: &Path) -> Result<PathBuf> {
        let p = self
            .path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("task '{}': csv source needs `path`", self.name)))?;
        Ok(base.join(p))
    }

    pub fn build(&self, base: &Path) -> Result<FederatedDataset> {
        let data = match self.source {
            TaskSource::Synthetic => synth_blobs(self.n_samples, self.n_features, self.n_classes, self.spread, self.seed)?,
            TaskSource::Csv => load_csv(&self.csv_path(base)?, &self.label)?,
        };
        federate(&data, self.n_clients, self.alpha, self.seed)
    }
}

fn d_one() -> usize {
    1
}
fn d_mode() -> Mode {
    Mode::Raw
}
fn d_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::FedAvg]
}
fn d_family() -> Family {
    Family::Lr
}

/// A study: tasks × algorithms × optimizers × repetitions under one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub name: String,
    /// Simulated seconds per optimizer run.
    pub budget_seconds: f64,
    #[serde(default = "d_one")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_mode")]
    pub mode: Mode,
    #[serde(default = "d_algorithms")]
    pub algorithms: Vec<Algorithm>,
    /// Built-in search space family, used unless `spaces` names the algorithm.
    #[serde(default = "d_family")]
    pub family: Family,
    /// Explicit search spaces keyed by algorithm name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub spaces: BTreeMap<String, SearchSpace>,
    /// Overrides the fidelity axes of every space in raw mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelitySpace>,
    /// Where tables and surrogates live; defaults to `tables` next to the config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables_dir: Option<PathBuf>,
    /// Table grid for tabular and surrogate modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableSpec>,
    #[serde(default)]
    pub system: SystemConfig,
    pub tasks: Vec<TaskSpec>,
    pub optimizers: Vec<OptimizerSpec>,
}

pub fn load_study_config(path: &Path) -> Result<StudyConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: StudyConfig = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn unique<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if n.is_empty() || n.contains(['/', '\\']) {
            return Err(Error::invalid(format!("{what} name '{n}' must be non-empty and contain no path separators")));
        }
        if !seen.insert(n) {
            return Err(Error::invalid(format!("duplicate {what} name '{n}'")));
        }
    }
    Ok(())
}

impl StudyConfig {
    pub fn validate(&self, base: &Path) -> Result<()> {
        if !(self.budget_seconds.is_finite() && self.budget_seconds > 0.0) {
            return Err(Error::invalid("budget_seconds must be positive"));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions must be at least 1"));
        }
        if self.tasks.is_empty() || self.optimizers.is_empty() || self.algorithms.is_empty() {
            return Err(Error::invalid("a study needs at least one task, algorithm and optimizer"));
        }
        unique("task", self.tasks.iter().map(|t| t.name.as_str()))?;
        unique("optimizer", self.optimizers.iter().map(|o| o.display_name()))?;
        self.system.validate()?;
        for t in &self.tasks {
            if t.source == TaskSource::Csv {
                let p = t.csv_path(base)?;
                if !p.exists() {
                    return Err(Error::invalid(format!("task '{}': {} does not exist", t.name, p.display())));
                }
            }
        }
        for o in &self.optimizers {
            o.validate()?;
            if o.kind.is_federated_wrapper() && self.mode != Mode::Raw {
                return Err(Error::invalid(format!(
                    "optimizer '{}' ({}) trains courses itself and needs mode = \"raw\"",
                    o.display_name(),
                    o.kind
                )));
            }
        }
        match (&self.table, self.mode) {
            (None, Mode::Tabular | Mode::Surrogate) => {
                Err(Error::invalid(format!("mode \"{}\" needs a [table] block", self.mode)))
            }
            (Some(t), _) => t.validate(),
            _ => Ok(()),
        }?;
        for a in &self.algorithms {
            self.space_for(*a)?;
        }
        Ok(())
    }

    /// Search space of `algorithm`, with fidelity axes matching the table in
    /// tabular and surrogate modes.
    pub fn space_for(&self, algorithm: Algorithm) -> Result<SearchSpace> {
        let mut space = match self.spaces.get(&algorithm.to_string()) {
            Some(s) => SearchSpace::new(s.dimensions.clone(), s.fidelity.clone())?,
            None => builtin_space(self.family, algorithm),
        };
        space.check_algorithm(algorithm)?;
        match (&self.table, self.mode) {
            (Some(t), Mode::Tabular | Mode::Surrogate) => {
                space.fidelity = table_fidelity(t)?;
            }
            _ => {
                if let Some(f) = &self.fidelity {
                    space.fidelity = FidelitySpace::new(f.min_rounds, f.max_rounds, f.sample_rates.clone())?;
                }
            }
        }
        Ok(space)
    }

    pub fn tables_dir(&self, base: &Path) -> PathBuf {
        base.join(self.tables_dir.as_deref().unwrap_or(Path::new("tables")))
    }

    /// SHA-256 of the canonical JSON rendering of this config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Builds the benchmark of `task` and `algorithm`, generating its table
    /// (and surrogate) under the tables directory when missing.
    pub fn benchmark(&self, base: &Path, task: &TaskSpec, algorithm: Algorithm) -> Result<BenchmarkHandle> {
        let space = self.space_for(algorithm)?;
        let data = task.build(base)?;
        if self.mode == Mode::Raw {
            return BenchmarkHandle::raw(&task.name, Arc::new(data), algorithm, space, self.system);
        }
        let spec = self.table.as_ref().expect("validated: table present");
        let dir = self.tables_dir(base);
        let stem = format!("{}__{}", task.name, algorithm);
        let table = generate_table(&data, &task.name, algorithm, &space, spec, &dir.join(format!("{stem}.csv")))?.table;
        if self.mode == Mode::Tabular {
            return BenchmarkHandle::tabular(Arc::new(table), self.system);
        }
        let path = dir.join(format!("{stem}.srg"));
        let model = match Surrogate::load(&path) {
            Ok(s) if s.meta == table.meta => s,
            _ => {
                let fit = fit_surrogate(&table, self.seed)?;
                fit.surrogate.save(&path)?;
                fit.surrogate
            }
        };
        BenchmarkHandle::surrogate(Arc::new(model), self.system)
    }
}

/// Fidelity axes spanned by a table grid.
pub fn table_fidelity(t: &TableSpec) -> Result<FidelitySpace> {
    let lo = t.rounds.iter().copied().min().unwrap_or(1);
    let hi = t.rounds.iter().copied().max().unwrap_or(1);
    FidelitySpace::new(lo, hi, t.sample_rates.clone())
}

/// The `gen-table` config: one task, one algorithm, one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub algorithm: Algorithm,
    #[serde(default = "d_family")]
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SearchSpace>,
    pub task: TaskSpec,
    pub table: TableSpec,
}

impl TableConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn space(&self) -> Result<SearchSpace> {
        let mut space = match &self.space {
            Some(s) => SearchSpace::new(s.dimensions.clone(), s.fidelity.clone())?,
            None => builtin_space(self.family, self.algorithm),
        };
        space.check_algorithm(self.algorithm)?;
        space.fidelity = table_fidelity(&self.table)?;
        Ok(space)
    }
}

#[derive(Serialize, Deserialize)]
struct TrialLine {
    schema_version: u32,
    #[serde(flatten)]
    trial: Trial,
}

/// Writes one JSON record per trial.
pub fn write_trial_log(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        let line = serde_json::to_string(&TrialLine {
            schema_version: SCHEMA_VERSION,
            trial: t.clone(),
        })
        .map_err(|e| Error::Parse(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_trial_log(path: &Path) -> Result<Vec<Trial>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TrialLine = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        trials.push(t.trial);
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyFile {
    schema_version: u32,
    incumbent_config: Option<HyperConfig>,
    policy: Option<Policy>,
    initial_policies: Vec<Policy>,
    trajectory: Vec<PolicySnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub task: String,
    pub algorithm: Algorithm,
    pub optimizer: String,
    pub repetition: usize,
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub n_trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incumbent_config: Option<HyperConfig>,
}

/// Contents of `study.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub mode: Mode,
    pub budget_seconds: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub system: SystemConfig,
    pub tasks: Vec<String>,
    pub algorithms: Vec<Algorithm>,
    pub optimizers: Vec<String>,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub n_cells: usize,
    /// `cell: message` for every failed cell.
    pub failures: Vec<String>,
}

fn cell_stem(task: &str, algorithm: Algorithm, optimizer: &str, rep: usize) -> String {
    format!("{task}__{algorithm}__{optimizer}__rep{rep}")
}

/// Runs every cell of `cfg` (in parallel on `jobs` threads, all cores when
/// `None`) and writes trial logs, `study.json` and the summary CSVs to `out`.
/// Relative paths in the config resolve against `base`.
pub fn run_study(cfg: &StudyConfig, base: &Path, out: &Path, jobs: Option<usize>) -> Result<StudyOutcome> {
    cfg.validate(base)?;
    for sub in ["trials", "policy"] {
        let d = out.join(sub);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;

    let benches: Vec<(usize, Algorithm)> = (0..cfg.tasks.len())
        .flat_map(|t| cfg.algorithms.iter().map(move |&a| (t, a)))
        .collect();
    let cells: Vec<(usize, usize, usize)> = (0..benches.len())
        .flat_map(|b| (0..cfg.optimizers.len()).flat_map(move |o| (0..cfg.repetitions).map(move |r| (b, o, r))))
        .collect();

    let results: Vec<std::result::Result<RunOutput, String>> = pool.install(|| {
        let handles: Vec<std::result::Result<BenchmarkHandle, String>> = benches
            .iter()
            .map(|&(t, a)| cfg.benchmark(base, &cfg.tasks[t], a).map_err(|e| e.to_string()))
            .collect();
        cells
            .par_iter()
            .map(|&(b, o, r)| {
                let h = handles[b].as_ref().map_err(|e| format!("benchmark unavailable: {e}"))?;
                let seed = rng::mix_all(cfg.seed, &[r as u64]);
                let res = run_any(&cfg.optimizers[o], h, cfg.budget_seconds, seed).map_err(|e| e.to_string());
                log::info!(
                    "cell {} done",
                    cell_stem(&cfg.tasks[benches[b].0].name, benches[b].1, cfg.optimizers[o].display_name(), r)
                );
                res
            })
            .collect()
    });

    let mut records = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    for (&(b, o, r), res) in cells.iter().zip(results) {
        let (t, a) = benches[b];
        let opt = cfg.optimizers[o].display_name();
        let stem = cell_stem(&cfg.tasks[t].name, a, opt, r);
        let mut rec = CellRecord {
            task: cfg.tasks[t].name.clone(),
            algorithm: a,
            optimizer: opt.to_string(),
            repetition: r,
            seed: rng::mix_all(cfg.seed, &[r as u64]),
            ok: false,
            error: None,
            n_trials: 0,
            trial_file: None,
            policy_file: None,
            incumbent_config: None,
        };
        match res {
            Ok(run) => {
                let file = format!("trials/{stem}.jsonl");
                write_trial_log(&out.join(&file), &run.trials)?;
                rec.ok = true;
                rec.n_trials = run.trials.len();
                rec.trial_file = Some(file);
                rec.incumbent_config = run.incumbent_config.clone();
                if run.policy.is_some() || !run.trajectory.is_empty() {
                    let file = format!("policy/{stem}.json");
                    let body = PolicyFile {
                        schema_version: SCHEMA_VERSION,
                        incumbent_config: run.incumbent_config,
                        policy: run.policy,
                        initial_policies: run.initial_policies,
                        trajectory: run.trajectory,
                    };
                    write_json(&out.join(&file), &body)?;
                    rec.policy_file = Some(file);
                }
            }
            Err(e) => {
                failures.push(format!("{stem}: {e}"));
                rec.error = Some(e);
            }
        }
        records.push(rec);
    }
    let study = StudyRecord {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        mode: cfg.mode,
        budget_seconds: cfg.budget_seconds,
        repetitions: cfg.repetitions,
        seed: cfg.seed,
        system: cfg.system,
        tasks: cfg.tasks.iter().map(|t| t.name.clone()).collect(),
        algorithms: cfg.algorithms.clone(),
        optimizers: cfg.optimizers.iter().map(|o| o.display_name().to_string()).collect(),
        cells: records,
    };
    write_json(&out.join("study.json"), &study)?;
    write_summaries(out)?;
    Ok(StudyOutcome {
        n_cells: cells.len(),
        failures,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Derives `final_losses.csv`, `sign_tests.csv`, `mean_rank.csv`,
/// `best_seen.csv`, `ecdf.csv` and `policy_trajectories.csv` from the study
/// files in `dir`.
pub fn write_summaries(dir: &Path) -> Result<()> {
    let study_path = dir.join("study.json");
    if !study_path.exists() {
        return Err(Error::invalid(format!("no study.json in {}", dir.display())));
    }
    let study: StudyRecord = read_json(&study_path)?;
    let sv = SCHEMA_VERSION.to_string();

    let mut trials: Vec<Option<Vec<Trial>>> = Vec::with_capacity(study.cells.len());
    for c in &study.cells {
        trials.push(match (&c.trial_file, c.ok) {
            (Some(f), true) => Some(read_trial_log(&dir.join(f))?),
            _ => None,
        });
    }
    let t_first = trials
        .iter()
        .flatten()
        .flatten()
        .map(|t| t.sim_time)
        .fold(f64::INFINITY, f64::min);
    let grid = time_grid(t_first.min(study.budget_seconds), study.budget_seconds, GRID_POINTS);
    let curves: Vec<Option<Vec<f64>>> = trials.iter().map(|t| t.as_ref().map(|t| best_seen(t, &grid))).collect();

    let mut rows = Vec::new();
    for (c, curve) in study.cells.iter().zip(&curves) {
        if let Some(curve) = curve {
            for (t, v) in grid.iter().zip(curve) {
                rows.push(vec![sv.clone(), c.task.clone(), c.algorithm.to_string(), c.optimizer.clone(), c.repetition.to_string(), num(*t), num(*v)]);
            }
        }
    }
    write_csv(&dir.join("best_seen.csv"), &["schema_version", "task", "algorithm", "optimizer", "repetition", "time", "best_seen_loss"], rows)?;

    // Final best-seen loss per (task, algorithm, optimizer) over repetitions.
    type Key = (String, Algorithm, String);
    let mut finals: BTreeMap<(usize, usize, usize), (Key, Vec<f64>, Vec<usize>)> = BTreeMap::new();
    let pos = |v: &[String], x: &str| v.iter().position(|y| y == x).unwrap_or(usize::MAX);
    let apos = |a: Algorithm| study.algorithms.iter().position(|&b| b == a).unwrap_or(usize::MAX);
    for ((c, curve), tr) in study.cells.iter().zip(&curves).zip(&trials) {
        if let (Some(curve), Some(tr)) = (curve, tr) {
            let k = (pos(&study.tasks, &c.task), apos(c.algorithm), pos(&study.optimizers, &c.optimizer));
            let e = finals
                .entry(k)
                .or_insert_with(|| ((c.task.clone(), c.algorithm, c.optimizer.clone()), Vec::new(), Vec::new()));
            e.1.push(*curve.last().expect("non-empty grid"));
            e.2.push(tr.len());
        }
    }
    let rows = finals
        .values()
        .map(|((task, algo, opt), losses, counts)| {
            let (m, s) = mean_std(losses);
            let mt = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            vec![sv.clone(), task.clone(), algo.to_string(), opt.clone(), losses.len().to_string(), num(m), num(s), num(mt)]
        })
        .collect();
    write_csv(
        &dir.join("final_losses.csv"),
        &["schema_version", "task", "algorithm", "optimizer", "n_repetitions", "mean_final_loss", "std_final_loss", "mean_trials"],
        rows,
    )?;

    // Sign tests between every pair of optimizers over benchmarks.
    let n_opt = study.optimizers.len();
    let mut rows = Vec::new();
    for a in 0..n_opt {
        for b in a + 1..n_opt {
            let (mut w, mut t, mut l) = (0u64, 0u64, 0u64);
            for ti in 0..study.tasks.len() {
                for ai in 0..study.algorithms.len() {
                    let (Some(x), Some(y)) = (finals.get(&(ti, ai, a)), finals.get(&(ti, ai, b))) else { continue };
                    let (mx, my) = (mean_std(&x.1).0, mean_std(&y.1).0);
                    if mx < my {
                        w += 1;
                    } else if mx > my {
                        l += 1;
                    } else {
                        t += 1;
                    }
                }
            }
            let p = sign_test(w, t, l).map(num).unwrap_or_default();
            rows.push(vec![sv.clone(), study.optimizers[a].clone(), study.optimizers[b].clone(), w.to_string(), t.to_string(), l.to_string(), p]);
        }
    }
    write_csv(&dir.join("sign_tests.csv"), &["schema_version", "optimizer_a", "optimizer_b", "wins", "ties", "losses", "p_value"], rows)?;

    // Mean rank over benchmark instances where every optimizer finished.
    let mut per_opt: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_opt];
    for ti in &study.tasks {
        for &al in &study.algorithms {
            for rep in 0..study.repetitions {
                let group: Vec<Option<&Vec<f64>>> = study
                    .optimizers
                    .iter()
                    .map(|o| {
                        study
                            .cells
                            .iter()
                            .position(|c| &c.task == ti && c.algorithm == al && &c.optimizer == o && c.repetition == rep)
                            .and_then(|i| curves[i].as_ref())
                    })
                    .collect();
                if group.iter().all(Option::is_some) {
                    for (o, c) in group.into_iter().enumerate() {
                        per_opt[o].push(c.expect("checked").clone());
                    }
                }
            }
        }
    }
    let mut header = vec!["schema_version".to_string(), "time".to_string()];
    header.extend(study.optimizers.iter().cloned());
    let mut rows = Vec::new();
    if n_opt >= 2 && !per_opt[0].is_empty() {
        let ranks = mean_rank(&per_opt)?;
        for (i, t) in grid.iter().enumerate() {
            let mut row = vec![sv.clone(), num(*t)];
            row.extend(ranks.iter().map(|r| num(r[i])));
            rows.push(row);
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&dir.join("mean_rank.csv"), &header_refs, rows)?;

    // ECDF of normalized regret over the highest-fidelity evaluations.
    let mut rows = Vec::new();
    for ti in &study.tasks {
        for &al in &study.algorithms {
            let all: Vec<&Trial> = study
                .cells
                .iter()
                .zip(&trials)
                .filter(|(c, _)| &c.task == ti && c.algorithm == al)
                .filter_map(|(_, t)| t.as_ref())
                .flatten()
                .collect();
            let Some(top) = all
                .iter()
                .map(|t| (t.rounds(), t.result.fidelity.sample_rate))
                .max_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
            else {
                continue;
            };
            let values: Vec<f64> = all
                .iter()
                .filter(|t| (t.rounds(), t.result.fidelity.sample_rate) == top)
                .map(|t| t.loss())
                .collect();
            if let Ok(points) = ecdf(&values) {
                for (r, f) in points {
                    rows.push(vec![sv.clone(), ti.clone(), al.to_string(), num(r), num(f)]);
                }
            }
        }
    }
    write_csv(&dir.join("ecdf.csv"), &["schema_version", "task", "algorithm", "normalized_regret", "fraction"], rows)?;

    let mut rows = Vec::new();
    for c in &study.cells {
        let Some(f) = &c.policy_file else { continue };
        let pf: PolicyFile = read_json(&dir.join(f))?;
        for s in &pf.trajectory {
            let Some(init) = pf.initial_policies.get(s.candidate) else { continue };
            for (d, probs) in init.dims.iter().zip(&s.probs) {
                for (arm, p) in d.arms.iter().zip(probs) {
                    rows.push(vec![
                        sv.clone(),
                        c.task.clone(),
                        c.algorithm.to_string(),
                        c.optimizer.clone(),
                        c.repetition.to_string(),
                        s.candidate.to_string(),
                        s.round.to_string(),
                        d.name.clone(),
                        num(*arm),
                        num(*p),
                    ]);
                }
            }
        }
    }
    write_csv(
        &dir.join("policy_trajectories.csv"),
        &["schema_version", "task", "algorithm", "optimizer", "repetition", "candidate", "round", "dimension", "arm", "probability"],
        rows,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::OptimizerKind;

    fn tiny_config() -> StudyConfig {
        let mut t1 = TaskSpec::synthetic("a", 1);
        t1.n_samples = 150;
        t1.n_clients = 4;
        let mut t2 = TaskSpec::synthetic("b", 2);
        t2.n_samples = 150;
        t2.n_clients = 4;
        StudyConfig {
            name: "tiny".into(),
            budget_seconds: 4000.0,
            repetitions: 5,
            seed: 11,
            mode: Mode::Tabular,
            algorithms: vec![Algorithm::FedAvg],
            family: Family::Lr,
            spaces: BTreeMap::from([(
                "fedavg".to_string(),
                SearchSpace::from_toml(
                    r#"
[[dimensions]]
name = "learning_rate"
kind = "continuous"
lo = 0.01
hi = 1.0
log = true
bins = 3

[[dimensions]]
name = "step_size"
kind = "integer"
lo = 1
hi = 2
bins = 2

[fidelity]
min_rounds = 1
max_rounds = 9
sample_rates = [1.0]
"#,
                )
                .unwrap(),
            )]),
            fidelity: None,
            tables_dir: None,
            table: Some(TableSpec::new(vec![1, 3, 9], vec![1.0], 2).unwrap()),
            system: SystemConfig::default(),
            tasks: vec![t1, t2],
            optimizers: vec![
                OptimizerSpec::new(OptimizerKind::Rs),
                OptimizerSpec::new(OptimizerKind::Hb),
                OptimizerSpec::new(OptimizerKind::Bohb),
            ],
        }
    }

    #[test]
    fn study_writes_every_cell_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<StudyConfig>(&text).unwrap(), cfg);
        let out = dir.path().join("out");
        let res = run_study(&cfg, dir.path(), &out, Some(1)).unwrap();
        assert_eq!(res.n_cells, 30);
        assert!(res.failures.is_empty(), "{:?}", res.failures);
        assert_eq!(fs::read_dir(out.join("trials")).unwrap().count(), 30);
        let names = ["final_losses.csv", "sign_tests.csv", "mean_rank.csv", "ecdf.csv", "best_seen.csv", "policy_trajectories.csv"];
        let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();
        let signs = String::from_utf8(first[1].clone()).unwrap();
        assert_eq!(signs.lines().count(), 1 + 3);
        assert!(!signs.contains("rs,rs"));

        let out2 = dir.path().join("out2");
        run_study(&cfg, dir.path(), &out2, Some(1)).unwrap();
        for (n, a) in names.iter().zip(&first) {
            assert_eq!(&fs::read(out2.join(n)).unwrap(), a, "{n}");
        }
        // The report alone regenerates identical files.
        fs::remove_file(out2.join("mean_rank.csv")).unwrap();
        write_summaries(&out2).unwrap();
        assert_eq!(fs::read(out2.join("mean_rank.csv")).unwrap(), first[2]);
    }

    #[test]
    fn config_errors_are_specific() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.table = None;
        assert!(cfg.validate(dir.path()).unwrap_err().to_string().contains("[table]"));
        let mut cfg = tiny_config();
        cfg.optimizers.push(OptimizerSpec::new(OptimizerKind::ShaFedex));
        assert!(cfg.validate(dir.path()).unwrap_err().to_string().contains("raw"));
        let mut cfg = tiny_config();
        cfg.optimizers.push(OptimizerSpec::new(OptimizerKind::Rs));
        assert!(cfg.validate(dir.path()).unwrap_err().to_string().contains("duplicate"));
        let err = toml::from_str::<StudyConfig>("name = \"x\"\ntasks = []\noptimizers = []").unwrap_err();
        assert!(err.to_string().contains("budget_seconds"));
        assert!(write_summaries(dir.path()).is_err());
    }
}
