//! FedEx: a server-side policy over client-side hyperparameters. Every
//! sampled client draws its own values from the policy each round, and the
//! policy takes an exponentiated-gradient step on the clients' validation
//! losses once the round ends.
//!
//! Clients only ever receive sampled values; the policy itself is not
//! broadcast. A wrapper (random search or successive halving) samples the
//! remaining dimensions, chooses the arms around its own sample, and scores
//! each course by its global validation loss.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backends::{course_seed, BenchmarkHandle, EvalResult, Metrics};
use crate::engine::{
    apply_client_values, decode_config, ClientFeedback, ClientHypers, ClientPlanner, Course,
    FixedPlanner,
};
use crate::error::{Error, Result};
use crate::optimizers::{
    incumbent, sha_schedule, Codec, FedexMode, OptimizerKind, OptimizerSpec, RunOutput, Trial,
};
use crate::rng::{self, Rng};
use crate::space::{Dimension, FidelityVector, HyperConfig, SearchSpace};
use crate::sysmodel::{course_time, sampled_course_time, BudgetLedger};

/// Client-side dimensions a policy may vary. Architecture dimensions stay
/// with the wrapper since all clients must share one model shape.
pub const TRAINING_DIMS: [&str; 5] = [
    "batch_size",
    "weight_decay",
    "step_size",
    "learning_rate",
    "dropout",
];

const STREAM_WRAP: u64 = 0xF3D;
const STREAM_ARMS: u64 = 0xA125;
const STREAM_TIME: u64 = 0x57A6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDim {
    pub name: String,
    pub arms: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Independent categorical distributions, one per client-side dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub dims: Vec<PolicyDim>,
}

impl Policy {
    pub fn uniform(dims: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dims = dims
            .into_iter()
            .map(|(name, arms)| {
                if arms.is_empty() {
                    return Err(Error::invalid(format!("policy dimension '{name}' has no arms")));
                }
                let p = 1.0 / arms.len() as f64;
                Ok(PolicyDim {
                    probs: vec![p; arms.len()],
                    name,
                    arms,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Policy { dims })
    }

    /// Uniform over the full grid of each trainable client-side dimension.
    pub fn for_space(space: &SearchSpace) -> Result<Self> {
        Policy::uniform(
            training_dims(space)
                .map(|d| (d.name().to_string(), d.grid().to_vec()))
                .collect(),
        )
    }

    pub fn names(&self) -> Vec<String> {
        self.dims.iter().map(|d| d.name.clone()).collect()
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.dims.iter().map(|d| d.probs.clone()).collect()
    }

    /// Every distribution is non-negative and sums to one within 1e-9.
    pub fn is_valid(&self) -> bool {
        self.dims.iter().all(|d| {
            d.probs.len() == d.arms.len()
                && d.probs.iter().all(|&p| p.is_finite() && p >= 0.0)
                && (d.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        })
    }

    /// One arm index per dimension, drawn independently.
    pub fn sample_arms(&self, r: &mut Rng) -> Vec<usize> {
        self.dims
            .iter()
            .map(|d| {
                let u = r.random::<f64>();
                let mut acc = 0.0;
                for (j, &p) in d.probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return j;
                    }
                }
                d.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
            })
            .collect()
    }

    pub fn values(&self, arms: &[usize]) -> Vec<f64> {
        self.dims.iter().zip(arms).map(|(d, &j)| d.arms[j]).collect()
    }

    /// Client-side values drawn with a fixed seed.
    pub fn sample_config(&self, seed: u64) -> HyperConfig {
        HyperConfig::new(self.values(&self.sample_arms(&mut rng::rng(seed))))
    }

    /// Most probable arm per dimension; ties go to the first.
    pub fn argmax(&self) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| {
                let mut best = 0;
                for (j, &p) in d.probs.iter().enumerate() {
                    if p > d.probs[best] {
                        best = j;
                    }
                }
                d.arms[best]
            })
            .collect()
    }

    /// `cfg` with this policy's dimensions set to their argmax arms.
    pub fn apply_argmax(&self, space: &SearchSpace, cfg: &HyperConfig) -> HyperConfig {
        let mut out = cfg.clone();
        for (d, v) in self.dims.iter().zip(self.argmax()) {
            if let Some(i) = space.index_of(&d.name) {
                out.values[i] = v;
            }
        }
        out
    }
}

fn training_dims(space: &SearchSpace) -> impl Iterator<Item = &Dimension> {
    space
        .client_dims()
        .map(|(_, d)| d)
        .filter(|d| TRAINING_DIMS.contains(&d.name()))
}

/// Feedback of one client in policy terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmFeedback {
    pub arms: Vec<usize>,
    pub loss: f64,
    pub n: usize,
    pub diverged: bool,
}

/// One exponentiated-gradient step. The gradient of arm `j` of a dimension
/// is `sum_i w_i (loss_i - baseline) [arm_i = j] / p_j` with `w_i`
/// proportional to sample counts. The baseline starts at the first round's
/// mean loss and then follows an exponential moving average with weight
/// `beta`; diverged clients count in the gradient but not in the baseline.
pub fn aggr_policy(
    policy: &mut Policy,
    feedback: &[ArmFeedback],
    baseline: &mut Option<f64>,
    eta_p: f64,
    beta: f64,
) {
    if feedback.is_empty() {
        return;
    }
    let total: usize = feedback.iter().map(|f| f.n).sum();
    let weight = |f: &ArmFeedback| {
        if total == 0 {
            1.0 / feedback.len() as f64
        } else {
            f.n as f64 / total as f64
        }
    };
    let (mut sw, mut sl) = (0.0, 0.0);
    for f in feedback.iter().filter(|f| !f.diverged) {
        sw += weight(f);
        sl += weight(f) * f.loss;
    }
    let round_mean = (sw > 0.0).then(|| sl / sw);
    let b = match (*baseline, round_mean) {
        (Some(b), _) => b,
        (None, Some(m)) => m,
        (None, None) => return,
    };
    for (d, dim) in policy.dims.iter_mut().enumerate() {
        let mut grad = vec![0.0; dim.probs.len()];
        for f in feedback {
            let j = f.arms[d];
            grad[j] += weight(f) * (f.loss - b) / dim.probs[j];
        }
        let logits: Vec<f64> = dim
            .probs
            .iter()
            .zip(&grad)
            .map(|(&p, &g)| if p > 0.0 { p.ln() - eta_p * g } else { f64::NEG_INFINITY })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        dim.probs = exps.into_iter().map(|e| e / z).collect();
    }
    if let Some(m) = round_mean {
        *baseline = Some((1.0 - beta) * b + beta * m);
    }
}

/// Policy probabilities of one candidate after a round (0 = initial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub candidate: usize,
    pub round: u32,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct PolicyState {
    policy: Policy,
    baseline: Option<f64>,
}

struct PolicyPlanner<'s> {
    state: &'s mut PolicyState,
    trajectory: &'s mut Vec<PolicySnapshot>,
    names: Vec<String>,
    base: ClientHypers,
    seed: u64,
    candidate: usize,
    adaptive: bool,
    eta_p: f64,
    beta: f64,
    assigned: Vec<Vec<usize>>,
}

impl ClientPlanner for PolicyPlanner<'_> {
    fn assign(&mut self, round: u32, clients: &[usize]) -> Vec<ClientHypers> {
        self.assigned = clients
            .iter()
            .map(|&c| {
                let mut r = rng::rng(rng::mix_all(self.seed, &[STREAM_ARMS, round as u64, c as u64]));
                self.state.policy.sample_arms(&mut r)
            })
            .collect();
        self.assigned
            .iter()
            .map(|a| {
                let mut h = self.base;
                apply_client_values(&mut h, &self.names, &self.state.policy.values(a));
                h
            })
            .collect()
    }

    fn feedback(&mut self, round: u32, feedback: &[ClientFeedback]) {
        if self.adaptive {
            let fb: Vec<ArmFeedback> = feedback
                .iter()
                .zip(&self.assigned)
                .map(|(f, a)| ArmFeedback {
                    arms: a.clone(),
                    loss: f.val_loss,
                    n: f.n_eval,
                    diverged: f.diverged,
                })
                .collect();
            aggr_policy(&mut self.state.policy, &fb, &mut self.state.baseline, self.eta_p, self.beta);
        }
        self.trajectory.push(PolicySnapshot {
            candidate: self.candidate,
            round,
            probs: self.state.policy.probs(),
        });
    }
}

/// Up to `arms` consecutive grid values around the one nearest `value`;
/// 0 takes the whole grid.
pub fn arm_window(dim: &Dimension, value: f64, arms: usize) -> Vec<f64> {
    let g = dim.grid();
    let m = if arms == 0 { g.len() } else { arms.min(g.len()) };
    let v = dim.nearest(value);
    let c = g.iter().position(|&x| x == v).unwrap_or(0);
    let start = c.saturating_sub((m - 1) / 2).min(g.len() - m);
    g[start..start + m].to_vec()
}

struct Candidate<'d> {
    config: HyperConfig,
    course: Course<'d>,
    state: Option<PolicyState>,
    base: ClientHypers,
    seed: u64,
    round_cost: f64,
}

/// Stages of a wrapper: `[(n_trials, rounds)]` for random search, the
/// successive-halving schedule otherwise.
pub fn wrapper_schedule(spec: &OptimizerSpec, handle: &BenchmarkHandle, sha: bool) -> Result<Vec<(usize, u32)>> {
    let total = spec.total_rounds.unwrap_or(handle.space.fidelity.max_rounds);
    if sha {
        if let Some(s) = &spec.schedule {
            if s.is_empty() || s.iter().any(|&(n, r)| n == 0 || r == 0) {
                return Err(Error::InfeasibleSchedule("explicit schedule needs positive stages".into()));
            }
            return Ok(s.clone());
        }
        sha_schedule(spec.n0.unwrap_or(27), spec.eta, spec.stages.unwrap_or(3), total, spec.schedule_rule)
    } else {
        let n = spec.n_trials.unwrap_or(10).max(1);
        let r = spec.rounds.unwrap_or(total / n as u32).max(1);
        Ok(vec![(n, r)])
    }
}

/// Runs `rs_oneshot`, `sha_oneshot`, `rs_fedex` or `sha_fedex` on a raw
/// benchmark. Every candidate keeps its course (and policy) across stages,
/// so a stage of `r` rounds charges exactly `r` rounds.
pub fn run_wrapped(spec: &OptimizerSpec, handle: &BenchmarkHandle, budget: f64, seed: u64) -> Result<RunOutput> {
    spec.validate()?;
    let (sha, mode) = match spec.kind {
        OptimizerKind::RsOneshot => (false, FedexMode::Off),
        OptimizerKind::ShaOneshot => (true, FedexMode::Off),
        OptimizerKind::RsFedex => (false, spec.fedex),
        OptimizerKind::ShaFedex => (true, spec.fedex),
        k => return Err(Error::invalid(format!("{k} is not a federated wrapper"))),
    };
    let data = handle
        .dataset()
        .ok_or_else(|| Error::invalid(format!("{} trains courses directly and needs a raw-mode benchmark", spec.kind)))?
        .clone();
    let schedule = wrapper_schedule(spec, handle, sha)?;
    let run_seed = rng::mix(seed, spec.seed);
    let sr = spec.sample_rate;
    let space = &handle.space;
    let codec = Codec::new(space, true);
    let mut wr = rng::rng(rng::mix(run_seed, STREAM_WRAP));
    let mut ledger = BudgetLedger::new(budget)?;
    let mut trajectory = Vec::new();
    let mut initial_policies = Vec::new();

    let mut cands: Vec<Candidate<'_>> = Vec::with_capacity(schedule[0].0);
    for i in 0..schedule[0].0 {
        let config = codec.decode(&codec.random(&mut wr));
        let decoded = decode_config(space, &config);
        let base = decoded.client;
        let cseed = course_seed(run_seed, &config);
        let state = match mode {
            FedexMode::Off => None,
            _ => {
                let dims = training_dims(space)
                    .map(|d| {
                        let v = space.get(&config, d.name()).expect("dimension of this space");
                        (d.name().to_string(), arm_window(d, v, spec.arms))
                    })
                    .collect();
                let policy = Policy::uniform(dims)?;
                initial_policies.push(policy.clone());
                trajectory.push(PolicySnapshot {
                    candidate: i,
                    round: 0,
                    probs: policy.probs(),
                });
                Some(PolicyState { policy, baseline: None })
            }
        };
        cands.push(Candidate {
            round_cost: handle.round_cost(&config, sr),
            course: Course::new(&data, handle.algorithm, decoded, sr, cseed)?,
            config,
            state,
            base,
            seed: cseed,
        });
    }

    let mut trials: Vec<Trial> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    let mut alive: Vec<usize> = (0..cands.len()).collect();
    let mut requested = 0u32;
    'stages: for (stage, &(_, r)) in schedule.iter().enumerate() {
        requested += r;
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(alive.len());
        for &ci in &alive {
            let Candidate {
                config,
                course,
                state,
                base,
                seed: cseed,
                round_cost,
            } = &mut cands[ci];
            let rounds = if ledger.is_exhausted() { 0 } else { r.min(ledger.affordable_rounds(*round_cost)) };
            if rounds == 0 {
                break 'stages;
            }
            let start = course.round();
            match state {
                None => {
                    let mut planner = FixedPlanner(*base);
                    for _ in 0..rounds {
                        course.step(&mut planner, false)?;
                    }
                }
                Some(st) => {
                    let mut planner = PolicyPlanner {
                        names: st.policy.names(),
                        state: st,
                        trajectory: &mut trajectory,
                        base: *base,
                        seed: *cseed,
                        candidate: ci,
                        adaptive: mode == FedexMode::Adaptive,
                        eta_p: spec.eta_p,
                        beta: spec.beta,
                        assigned: Vec::new(),
                    };
                    for _ in 0..rounds {
                        course.step(&mut planner, false)?;
                    }
                }
            }
            let metrics = Metrics::from(course.metrics());
            let params = handle.system_params(config);
            let fid = FidelityVector::new(rounds, sr);
            let elapsed = if handle.system.sampled_stragglers {
                sampled_course_time(&params, handle.n_clients, &fid, rng::mix_all(*cseed, &[STREAM_TIME, start as u64]))
            } else {
                course_time(&params, handle.n_clients, &fid)
            };
            ledger.charge(elapsed)?;
            trials.push(Trial {
                index: trials.len(),
                config: config.clone(),
                requested_rounds: requested,
                result: EvalResult {
                    metrics,
                    fidelity: FidelityVector::new(course.round(), sr),
                    truncated: rounds < r,
                    elapsed_seconds: elapsed,
                    diverged: course.diverged(),
                },
                sim_time: ledger.spent(),
            });
            owner.push(ci);
            scored.push((ci, metrics.valid_loss));
        }
        if let Some(&(n_next, _)) = schedule.get(stage + 1) {
            scored.sort_by(|a, b| a.1.total_cmp(&b.1));
            alive = scored.iter().take(n_next).map(|s| s.0).collect();
        }
    }

    let (incumbent_config, policy) = match incumbent(&trials) {
        Some(i) => {
            let c = &cands[owner[i]];
            match &c.state {
                Some(st) => (Some(st.policy.apply_argmax(space, &c.config)), Some(st.policy.clone())),
                None => (Some(c.config.clone()), None),
            }
        }
        None => (None, None),
    };
    Ok(RunOutput {
        trials,
        incumbent_config,
        policy,
        initial_policies,
        trajectory,
    })
}

/// Mean and sample standard deviation of test accuracy of full courses of
/// `cfg` over `seeds`.
pub fn evaluate_incumbent(handle: &BenchmarkHandle, cfg: &HyperConfig, b: &FidelityVector, seeds: &[u64]) -> Result<(f64, f64)> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is needed"));
    }
    let accs = seeds
        .iter()
        .map(|&s| handle.query(cfg, b, s).map(|(m, _)| m.test_acc))
        .collect::<Result<Vec<_>>>()?;
    let n = accs.len() as f64;
    let mean = accs[0] + accs.iter().map(|a| a - accs[0]).sum::<f64>() / n;
    let std = if accs.len() > 1 {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}
