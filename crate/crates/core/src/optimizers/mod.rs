//! Single- and multi-fidelity HPO methods driving a benchmark under a
//! simulated-time budget.
//!
//! Every optimizer works in the unit cube and decodes points through a
//! [`Codec`]; on tabular benchmarks decoding lands on grid points only.
//! Multi-fidelity methods vary the number of rounds; the sample rate stays
//! fixed per run.

mod codec;
mod de;
mod hyperband;
mod kde;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use codec::Codec;
pub use de::{crossover, latin_hypercube, mutant};
pub use hyperband::{
    hb_brackets, run_bracket, run_brackets, schedule_cost, sha_schedule, BracketPolicy,
    DehbPolicy, KdePolicy, RandomPolicy, ScheduleRule,
};
pub use kde::{propose as kde_propose, KdeParams};

use crate::backends::{BenchmarkHandle, EvalResult, Mode};
use crate::error::{Error, Result};
use crate::fedex::{Policy, PolicySnapshot};
use crate::rng;
use crate::space::{FidelityVector, HyperConfig};
use crate::sysmodel::BudgetLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Rs,
    De,
    BoKde,
    Sha,
    Hb,
    Bohb,
    Dehb,
    RsOneshot,
    ShaOneshot,
    RsFedex,
    ShaFedex,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 11] = [
        OptimizerKind::Rs,
        OptimizerKind::De,
        OptimizerKind::BoKde,
        OptimizerKind::Sha,
        OptimizerKind::Hb,
        OptimizerKind::Bohb,
        OptimizerKind::Dehb,
        OptimizerKind::RsOneshot,
        OptimizerKind::ShaOneshot,
        OptimizerKind::RsFedex,
        OptimizerKind::ShaFedex,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Rs => "rs",
            OptimizerKind::De => "de",
            OptimizerKind::BoKde => "bo_kde",
            OptimizerKind::Sha => "sha",
            OptimizerKind::Hb => "hb",
            OptimizerKind::Bohb => "bohb",
            OptimizerKind::Dehb => "dehb",
            OptimizerKind::RsOneshot => "rs_oneshot",
            OptimizerKind::ShaOneshot => "sha_oneshot",
            OptimizerKind::RsFedex => "rs_fedex",
            OptimizerKind::ShaFedex => "sha_fedex",
        }
    }

    /// Kinds that train courses with per-client configurations.
    pub fn is_federated_wrapper(&self) -> bool {
        matches!(
            self,
            OptimizerKind::RsOneshot
                | OptimizerKind::ShaOneshot
                | OptimizerKind::RsFedex
                | OptimizerKind::ShaFedex
        )
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown optimizer kind '{s}'")))
    }
}

/// How FedEx explores client-side configurations inside a course.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedexMode {
    /// No per-client exploration: every client uses the wrapper's config.
    Off,
    /// Per-client draws from a uniform policy that never updates.
    Frozen,
    #[default]
    Adaptive,
}

fn d_eta() -> usize {
    3
}
fn d_sample_rate() -> f64 {
    1.0
}
fn d_population() -> usize {
    20
}
fn d_half() -> f64 {
    0.5
}
fn d_tenth() -> f64 {
    0.1
}
fn d_arms() -> usize {
    3
}

/// One optimizer with all its knobs. Unset optional knobs take kind-specific
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default)]
    pub name: String,
    pub kind: OptimizerKind,
    /// Mixed into the repetition seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_sample_rate")]
    pub sample_rate: f64,
    /// Full-fidelity rounds; the largest budget of multi-fidelity methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u32>,
    /// Smallest budget of multi-fidelity methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_rounds: Option<u32>,
    /// Cap on the number of trials of random search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_trials: Option<usize>,
    #[serde(default = "d_eta")]
    pub eta: usize,
    /// Number of Hyperband brackets used, most aggressive first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brackets: Option<usize>,
    /// Successive-halving schedule from `sha_schedule(n0, eta, stages, total_rounds)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_rounds: Option<u32>,
    #[serde(default)]
    pub schedule_rule: ScheduleRule,
    /// Explicit `[n_i, r_i]` stages, used verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<(usize, u32)>>,
    #[serde(default = "d_population")]
    pub population: usize,
    #[serde(default = "d_half")]
    pub mutation_factor: f64,
    #[serde(default = "d_half")]
    pub crossover_prob: f64,
    #[serde(default)]
    pub kde: KdeParams,
    /// FedEx policy step size.
    #[serde(default = "d_tenth")]
    pub eta_p: f64,
    /// FedEx baseline smoothing.
    #[serde(default = "d_tenth")]
    pub beta: f64,
    #[serde(default)]
    pub fedex: FedexMode,
    /// Grid values per dimension a wrapper trial hands to FedEx, centered on
    /// its own sample; 0 means the whole grid.
    #[serde(default = "d_arms")]
    pub arms: usize,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerSpec {
            name: kind.to_string(),
            kind,
            seed: 0,
            sample_rate: d_sample_rate(),
            rounds: None,
            min_rounds: None,
            n_trials: None,
            eta: d_eta(),
            brackets: None,
            n0: None,
            stages: None,
            total_rounds: None,
            schedule_rule: ScheduleRule::default(),
            schedule: None,
            population: d_population(),
            mutation_factor: d_half(),
            crossover_prob: d_half(),
            kde: KdeParams::default(),
            eta_p: d_tenth(),
            beta: d_tenth(),
            fedex: FedexMode::default(),
            arms: d_arms(),
        }
    }

    pub fn display_name(&self) -> &str {
        if self.name.is_empty() {
            self.kind.as_str()
        } else {
            &self.name
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::invalid("optimizer sample_rate must lie in (0, 1]"));
        }
        if self.eta < 2 {
            return Err(Error::invalid("eta must be at least 2"));
        }
        if self.population < 4 {
            return Err(Error::invalid("population must be at least 4"));
        }
        if !(0.0..=2.0).contains(&self.mutation_factor) || !(0.0..=1.0).contains(&self.crossover_prob) {
            return Err(Error::invalid("mutation_factor must lie in [0, 2] and crossover_prob in [0, 1]"));
        }
        let k = &self.kde;
        if !(k.gamma > 0.0 && k.gamma < 1.0)
            || k.n_samples == 0
            || !(0.0..=1.0).contains(&k.random_fraction)
            || !(k.bandwidth_factor > 0.0)
            || !(k.min_bandwidth > 0.0)
        {
            return Err(Error::invalid("kde knobs out of range"));
        }
        if !(self.eta_p >= 0.0) || !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid("eta_p must be >= 0 and beta in (0, 1]"));
        }
        Ok(())
    }
}

/// One evaluation made by an optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: HyperConfig,
    /// Rounds asked for before any budget truncation.
    pub requested_rounds: u32,
    pub result: EvalResult,
    /// Simulated seconds spent once this trial completed.
    pub sim_time: f64,
}

impl Trial {
    pub fn loss(&self) -> f64 {
        self.result.metrics.valid_loss
    }

    pub fn rounds(&self) -> u32 {
        self.result.fidelity.rounds
    }
}

/// Budget accounting and trial log shared by all optimizers.
pub struct Runner<'h> {
    pub handle: &'h BenchmarkHandle,
    pub ledger: BudgetLedger,
    pub trials: Vec<Trial>,
    pub codec: Codec,
    pub sample_rate: f64,
    pub eval_seed: u64,
    finished: bool,
}

impl<'h> Runner<'h> {
    pub fn new(handle: &'h BenchmarkHandle, budget: f64, sample_rate: f64, eval_seed: u64) -> Result<Self> {
        Ok(Runner {
            handle,
            ledger: BudgetLedger::new(budget)?,
            trials: Vec::new(),
            codec: Codec::new(&handle.space, handle.mode() == Mode::Tabular),
            sample_rate,
            eval_seed,
            finished: false,
        })
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    /// Largest round count the benchmark can answer that does not exceed
    /// `r` (the smallest available when none does).
    pub fn snap_rounds(&self, r: u32) -> u32 {
        match self.handle.table_rounds() {
            Some(grid) => grid
                .iter()
                .rev()
                .copied()
                .find(|&g| g <= r)
                .unwrap_or(grid[0]),
            None => r.max(1),
        }
    }

    /// Evaluates the decoded point at `rounds`. `None` once the budget cannot
    /// pay for another evaluation.
    pub fn evaluate(&mut self, u: &[f64], rounds: u32) -> Result<Option<f64>> {
        let cfg = self.codec.decode(u);
        self.evaluate_config(cfg, rounds)
    }

    pub fn evaluate_config(&mut self, cfg: HyperConfig, rounds: u32) -> Result<Option<f64>> {
        if self.finished {
            return Ok(None);
        }
        let b = FidelityVector::new(rounds, self.sample_rate);
        match self.handle.evaluate(&mut self.ledger, &cfg, &b, self.eval_seed) {
            Ok(result) => {
                let loss = result.metrics.valid_loss;
                self.trials.push(Trial {
                    index: self.trials.len(),
                    config: cfg,
                    requested_rounds: rounds,
                    result,
                    sim_time: self.ledger.spent(),
                });
                Ok(Some(loss))
            }
            Err(Error::BudgetExhausted) => {
                self.finished = true;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

/// Full-fidelity round count for `spec` on `handle`.
pub fn full_rounds(spec: &OptimizerSpec, handle: &BenchmarkHandle) -> u32 {
    spec.rounds.unwrap_or_else(|| match handle.table_rounds() {
        Some(grid) => *grid.last().expect("non-empty round grid"),
        None => handle.space.fidelity.max_rounds,
    })
}

/// Smallest multi-fidelity budget for `spec` on `handle`.
pub fn min_rounds(spec: &OptimizerSpec, handle: &BenchmarkHandle) -> u32 {
    spec.min_rounds
        .unwrap_or_else(|| match handle.table_rounds() {
            Some(grid) => grid[0],
            None => handle.space.fidelity.min_rounds,
        })
        .max(1)
}

/// Stage schedule of the `sha` optimizer: explicit, from `sha_schedule`, or
/// the most aggressive Hyperband bracket.
pub fn sha_plan(spec: &OptimizerSpec, handle: &BenchmarkHandle) -> Result<Vec<(usize, u32)>> {
    if let Some(s) = &spec.schedule {
        if s.is_empty() || s.iter().any(|&(n, r)| n == 0 || r == 0) {
            return Err(Error::InfeasibleSchedule("explicit schedule needs positive stages".into()));
        }
        return Ok(s.clone());
    }
    if let (Some(n0), Some(stages)) = (spec.n0, spec.stages) {
        let total = spec.total_rounds.unwrap_or_else(|| full_rounds(spec, handle));
        return sha_schedule(n0, spec.eta, stages, total, spec.schedule_rule);
    }
    let brackets = hb_brackets(min_rounds(spec, handle), full_rounds(spec, handle), spec.eta)?;
    Ok(brackets[0].clone())
}

/// Index of the incumbent: a trial replaces the current one when it was run
/// for at least as many rounds and reached a lower validation loss.
pub fn incumbent(trials: &[Trial]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        let replace = match best {
            None => true,
            Some(b) => t.rounds() >= trials[b].rounds() && t.loss() < trials[b].loss(),
        };
        if replace {
            best = Some(i);
        }
    }
    best
}

/// Everything one optimizer run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trials: Vec<Trial>,
    /// Configuration the run recommends; FedEx runs replace the client-side
    /// values with the argmax arms of the incumbent's policy.
    pub incumbent_config: Option<HyperConfig>,
    /// Final policy of the incumbent (FedEx modes only).
    pub policy: Option<Policy>,
    /// Starting policy of every wrapper candidate, indexed like
    /// [`PolicySnapshot::candidate`]; names the arms of the trajectory.
    pub initial_policies: Vec<Policy>,
    pub trajectory: Vec<PolicySnapshot>,
}

/// Runs any optimizer kind, dispatching wrapper kinds to the fedex module.
pub fn run_any(spec: &OptimizerSpec, handle: &BenchmarkHandle, budget: f64, seed: u64) -> Result<RunOutput> {
    if spec.kind.is_federated_wrapper() {
        return crate::fedex::run_wrapped(spec, handle, budget, seed);
    }
    let trials = run_optimizer(spec, handle, budget, seed)?;
    let incumbent_config = incumbent(&trials).map(|i| trials[i].config.clone());
    Ok(RunOutput {
        trials,
        incumbent_config,
        policy: None,
        initial_policies: Vec::new(),
        trajectory: Vec::new(),
    })
}

const STREAM_OPT: u64 = 0x0B7;

/// Runs a classical optimizer until the budget is used up. Federated
/// wrapper kinds are handled by the FedEx module.
pub fn run_optimizer(spec: &OptimizerSpec, handle: &BenchmarkHandle, budget: f64, seed: u64) -> Result<Vec<Trial>> {
    spec.validate()?;
    if spec.kind.is_federated_wrapper() {
        return Err(Error::invalid(format!(
            "{} trains courses with per-client configurations; run it through the fedex module",
            spec.kind
        )));
    }
    let run_seed = rng::mix(seed, spec.seed);
    let mut runner = Runner::new(handle, budget, spec.sample_rate, run_seed)?;
    let mut r = rng::rng(rng::mix(run_seed, STREAM_OPT));
    let full = runner.snap_rounds(full_rounds(spec, handle));
    match spec.kind {
        OptimizerKind::Rs => {
            let cap = spec.n_trials.unwrap_or(usize::MAX);
            while runner.trials.len() < cap {
                let u = runner.codec.random(&mut r);
                if runner.evaluate(&u, full)?.is_none() {
                    break;
                }
            }
        }
        OptimizerKind::De => run_de(&mut runner, spec, full, &mut r)?,
        OptimizerKind::BoKde => {
            let mut obs: Vec<(Vec<f64>, f64)> = Vec::new();
            loop {
                let u = kde::propose(&obs, &runner.codec, &spec.kde, &mut r);
                let Some(loss) = runner.evaluate(&u, full)? else { break };
                obs.push((u, loss));
            }
        }
        OptimizerKind::Sha => {
            let plan = sha_plan(spec, handle)?;
            run_brackets(&mut runner, &[plan], &mut RandomPolicy, &mut r, true)?;
        }
        OptimizerKind::Hb | OptimizerKind::Bohb | OptimizerKind::Dehb => {
            let mut brackets = hb_brackets(min_rounds(spec, handle), full_rounds(spec, handle), spec.eta)?;
            if let Some(k) = spec.brackets {
                brackets.truncate(k.max(1));
            }
            let mut policy: Box<dyn BracketPolicy> = match spec.kind {
                OptimizerKind::Hb => Box::new(RandomPolicy),
                OptimizerKind::Bohb => Box::new(KdePolicy::new(spec.kde)),
                _ => Box::new(DehbPolicy::new(spec.population, spec.mutation_factor, spec.crossover_prob)),
            };
            run_brackets(&mut runner, &brackets, policy.as_mut(), &mut r, true)?;
        }
        _ => unreachable!("wrapper kinds rejected above"),
    }
    Ok(runner.trials)
}

fn run_de(runner: &mut Runner<'_>, spec: &OptimizerSpec, rounds: u32, r: &mut rng::Rng) -> Result<()> {
    let d = runner.codec.len();
    let mut pop: Vec<(Vec<f64>, f64)> = Vec::with_capacity(spec.population);
    for u in latin_hypercube(spec.population, d, r) {
        let Some(loss) = runner.evaluate(&u, rounds)? else { return Ok(()) };
        pop.push((u, loss));
    }
    loop {
        for i in 0..pop.len() {
            let pool: Vec<&[f64]> = pop.iter().map(|(u, _)| u.as_slice()).collect();
            let m = mutant(&pool, Some(i), spec.mutation_factor, r);
            let trial = crossover(&pop[i].0, &m, spec.crossover_prob, r);
            let Some(loss) = runner.evaluate(&trial, rounds)? else { return Ok(()) };
            if loss <= pop[i].1 {
                pop[i] = (trial, loss);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{generate_table, LookupTable, TableSpec};
    use crate::dataflow::{federate, synth_blobs};
    use crate::space::{Algorithm, Dimension, FidelitySpace, SearchSpace};
    use crate::sysmodel::SystemConfig;
    use std::sync::Arc;

    fn table_handle() -> (tempfile::TempDir, BenchmarkHandle) {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t.csv");
        let d = federate(&synth_blobs(150, 3, 3, 0.8, 1).unwrap(), 4, 0.5, 1).unwrap();
        let space = SearchSpace::new(
            vec![
                Dimension::continuous("learning_rate", 0.001, 1.0, true, 4).unwrap(),
                Dimension::integer("step_size", 1.0, 3.0, false, 3).unwrap(),
                Dimension::integer("batch_size", 8.0, 32.0, true, 3).unwrap(),
            ],
            FidelitySpace::new(1, 9, vec![1.0]).unwrap(),
        )
        .unwrap();
        let spec = TableSpec::new(vec![1, 3, 9], vec![1.0], 1).unwrap();
        let t: LookupTable = generate_table(&d, "blobs", Algorithm::FedAvg, &space, &spec, &out).unwrap().table;
        let h = BenchmarkHandle::tabular(Arc::new(t), SystemConfig::default()).unwrap();
        (dir, h)
    }

    #[test]
    fn tiny_budget_gives_no_trials() {
        let (_d, h) = table_handle();
        let cfg = h.space.dimensions.iter().map(|d| d.grid()[0]).collect();
        let tau = h.round_cost(&HyperConfig::new(cfg), 1.0);
        for kind in [OptimizerKind::Rs, OptimizerKind::Hb, OptimizerKind::Bohb, OptimizerKind::De] {
            let trials = run_optimizer(&OptimizerSpec::new(kind), &h, 0.5 * tau, 0).unwrap();
            assert!(trials.is_empty());
        }
    }

    #[test]
    fn all_optimizers_respect_budget_and_are_deterministic() {
        let (_d, h) = table_handle();
        let cfg = HyperConfig::new(h.space.dimensions.iter().map(|d| d.grid()[0]).collect());
        let tau = h.round_cost(&cfg, 1.0);
        let budget = 400.0 * tau;
        for kind in [
            OptimizerKind::Rs,
            OptimizerKind::De,
            OptimizerKind::BoKde,
            OptimizerKind::Sha,
            OptimizerKind::Hb,
            OptimizerKind::Bohb,
            OptimizerKind::Dehb,
        ] {
            let spec = OptimizerSpec::new(kind);
            let a = run_optimizer(&spec, &h, budget, 7).unwrap();
            assert!(!a.is_empty(), "{kind}");
            let spent = a.last().unwrap().sim_time;
            assert!(spent <= budget + tau * 1.0001, "{kind}: {spent} > {budget}");
            assert!(a.windows(2).all(|w| w[0].sim_time <= w[1].sim_time));
            assert_eq!(a, run_optimizer(&spec, &h, budget, 7).unwrap(), "{kind}");
        }
    }

    #[test]
    fn single_bracket_hyperband_equals_sha() {
        let (_d, h) = table_handle();
        let mut hb = OptimizerSpec::new(OptimizerKind::Hb);
        hb.brackets = Some(1);
        let sha = OptimizerSpec::new(OptimizerKind::Sha);
        let cfg = HyperConfig::new(h.space.dimensions.iter().map(|d| d.grid()[0]).collect());
        let budget = 100.0 * h.round_cost(&cfg, 1.0);
        let a = run_optimizer(&hb, &h, budget, 3).unwrap();
        let b = run_optimizer(&sha, &h, budget, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.len() > 13);
    }

    #[test]
    fn sha_promotes_top_third() {
        let (_d, h) = table_handle();
        let mut spec = OptimizerSpec::new(OptimizerKind::Sha);
        spec.schedule = Some(vec![(9, 1), (3, 3), (1, 9)]);
        let cfg = HyperConfig::new(h.space.dimensions.iter().map(|d| d.grid()[0]).collect());
        let trials = run_optimizer(&spec, &h, 30.0 * h.round_cost(&cfg, 1.0), 0).unwrap();
        let first = &trials[..9];
        let mut ranked: Vec<&Trial> = first.iter().collect();
        ranked.sort_by(|a, b| a.loss().total_cmp(&b.loss()));
        let promoted: Vec<&HyperConfig> = ranked[..3].iter().map(|t| &t.config).collect();
        let second: Vec<&HyperConfig> = trials[9..12].iter().map(|t| &t.config).collect();
        assert_eq!(promoted, second);
        assert!(trials[9..12].iter().all(|t| t.rounds() == 3));
    }

    #[test]
    fn wrapper_kinds_are_rejected() {
        let (_d, h) = table_handle();
        assert!(run_optimizer(&OptimizerSpec::new(OptimizerKind::RsFedex), &h, 10.0, 0).is_err());
    }

    #[test]
    fn spec_parses_with_defaults() {
        let s: OptimizerSpec = toml::from_str("kind = \"bohb\"\nname = \"b\"\neta = 3\nbrackets = 2").unwrap();
        assert_eq!(s.kind, OptimizerKind::Bohb);
        assert_eq!(s.population, 20);
        assert_eq!(s.kde.n_samples, 64);
        assert!(toml::from_str::<OptimizerSpec>("kind = \"rs\"\nbogus = 1").is_err());
        let s: OptimizerSpec = toml::from_str("kind = \"sha\"\nschedule = [[27, 12], [9, 13], [3, 19]]").unwrap();
        assert_eq!(s.schedule.unwrap()[2], (3, 19));
    }
}
