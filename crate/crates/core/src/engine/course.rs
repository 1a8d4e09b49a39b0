use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::model::{ModelParams, SplitMetrics};
use super::{
    decode_config, fedavg_aggregate, fedopt_aggregate, local_update, ClientHypers, DecodedConfig,
    LOSS_CAP,
};
use crate::dataflow::{Dataset, FederatedDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::space::{Algorithm, FidelityVector, HyperConfig, SearchSpace};

const STREAM_INIT: u64 = 0x1417;
const STREAM_SAMPLE: u64 = 0x5A3F;
const STREAM_LOCAL: u64 = 0x10CA;

/// Sample-weighted metrics over every client, one entry per split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalMetrics {
    pub train: SplitMetrics,
    pub valid: SplitMetrics,
    pub test: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFeedback {
    pub client: usize,
    pub hypers: ClientHypers,
    /// Validation loss of the locally updated model, capped at [`LOSS_CAP`].
    pub val_loss: f64,
    /// Size of the split `val_loss` was measured on.
    pub n_eval: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Number of completed rounds; 0 describes the initial model.
    pub round_index: u32,
    pub sampled_clients: Vec<usize>,
    /// Present on rounds where evaluation was requested.
    pub global_metrics: Option<GlobalMetrics>,
    pub per_client_feedback: Vec<ClientFeedback>,
    pub diverged: bool,
}

/// Chooses the local hyperparameters of each sampled client and receives
/// their feedback once the round finishes.
pub trait ClientPlanner {
    fn assign(&mut self, round: u32, clients: &[usize]) -> Vec<ClientHypers>;

    fn feedback(&mut self, _round: u32, _feedback: &[ClientFeedback]) {}
}

/// Every client trains with the same hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct FixedPlanner(pub ClientHypers);

impl ClientPlanner for FixedPlanner {
    fn assign(&mut self, _round: u32, clients: &[usize]) -> Vec<ClientHypers> {
        vec![self.0; clients.len()]
    }
}

/// A federated training run that can be advanced round by round.
///
/// Every random draw of round `t` is derived from `(seed, t)`, so running
/// `r` rounds yields exactly the prefix of a longer run.
#[derive(Debug, Clone)]
pub struct Course<'a> {
    task: &'a FederatedDataset,
    algorithm: Algorithm,
    config: DecodedConfig,
    sample_rate: f64,
    seed: u64,
    model: ModelParams,
    buffer: ModelParams,
    round: u32,
    diverged: bool,
}

impl<'a> Course<'a> {
    pub fn new(
        task: &'a FederatedDataset,
        algorithm: Algorithm,
        config: DecodedConfig,
        sample_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(Error::invalid(format!("sample_rate {sample_rate} outside (0, 1]")));
        }
        let model = ModelParams::init(
            config.architecture,
            task.n_features(),
            task.n_classes(),
            rng::mix(seed, STREAM_INIT),
        );
        let buffer = model.zeros_like();
        Ok(Course {
            task,
            algorithm,
            config,
            sample_rate,
            seed,
            model,
            buffer,
            round: 0,
            diverged: false,
        })
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn config(&self) -> &DecodedConfig {
        &self.config
    }

    pub fn n_sampled(&self) -> usize {
        FidelityVector::new(1, self.sample_rate).sampled_clients(self.task.n_clients())
    }

    /// Clients drawn uniformly without replacement for round `round` (1-based).
    pub fn sample_clients(&self, round: u32) -> Vec<usize> {
        let n = self.task.n_clients();
        let k = self.n_sampled();
        if k >= n {
            return (0..n).collect();
        }
        let mut r = rng::rng(rng::mix_all(self.seed, &[STREAM_SAMPLE, round as u64]));
        let mut picked = index::sample(&mut r, n, k).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Seed of the local update of `client` in round `round`.
    pub fn local_seed(seed: u64, round: u32, client: usize) -> u64 {
        rng::mix_all(seed, &[STREAM_LOCAL, round as u64, client as u64])
    }

    /// Runs one round. A client whose local training diverges is left out of
    /// the aggregate and reports a capped loss; when no client survives, or
    /// the aggregate is non-finite, the course freezes at its last finite model.
    pub fn step(&mut self, planner: &mut dyn ClientPlanner, evaluate: bool) -> Result<RoundReport> {
        let round = self.round + 1;
        let sampled = self.sample_clients(round);
        if self.diverged {
            self.round = round;
            return Ok(self.report(sampled, Vec::new(), evaluate));
        }
        let hypers = planner.assign(round, &sampled);
        if hypers.len() != sampled.len() {
            return Err(Error::invalid("planner returned the wrong number of assignments"));
        }
        let mut updates = Vec::with_capacity(sampled.len());
        let mut feedback = Vec::with_capacity(sampled.len());
        for (&c, h) in sampled.iter().zip(&hypers) {
            let data = &self.task.clients[c];
            let out = local_update(
                &self.model,
                &data.train,
                h,
                h.step_size.max(1),
                Self::local_seed(self.seed, round, c),
            )?;
            let eval_split: &Dataset = if data.valid.is_empty() { &data.train } else { &data.valid };
            let val = out.model.evaluate(eval_split).loss;
            let diverged = out.diverged || !val.is_finite() || val > LOSS_CAP;
            feedback.push(ClientFeedback {
                client: c,
                hypers: *h,
                val_loss: if diverged { LOSS_CAP } else { val },
                n_eval: eval_split.len(),
                diverged,
            });
            if !diverged {
                updates.push((out.model, data.train.len()));
            }
        }
        planner.feedback(round, &feedback);
        if updates.is_empty() {
            self.diverged = true;
        } else {
            let next = match self.algorithm {
                Algorithm::FedAvg => fedavg_aggregate(&updates)?,
                Algorithm::FedOpt => {
                    let mut buffer = self.buffer.clone();
                    let next = fedopt_aggregate(&mut buffer, &self.model, &updates, &self.config.server)?;
                    self.buffer = buffer;
                    next
                }
            };
            if next.is_finite() {
                self.model = next;
            } else {
                self.diverged = true;
            }
        }
        self.round = round;
        Ok(self.report(sampled, feedback, evaluate))
    }

    fn report(&self, sampled: Vec<usize>, feedback: Vec<ClientFeedback>, evaluate: bool) -> RoundReport {
        RoundReport {
            round_index: self.round,
            sampled_clients: sampled,
            global_metrics: evaluate.then(|| self.metrics()),
            per_client_feedback: feedback,
            diverged: self.diverged,
        }
    }

    /// Report of the current model without training.
    pub fn snapshot(&self) -> RoundReport {
        RoundReport {
            round_index: self.round,
            sampled_clients: Vec::new(),
            global_metrics: Some(self.metrics()),
            per_client_feedback: Vec::new(),
            diverged: self.diverged,
        }
    }

    /// Global metrics of the current model, losses capped at [`LOSS_CAP`].
    pub fn metrics(&self) -> GlobalMetrics {
        let mut parts: [Vec<SplitMetrics>; 3] = Default::default();
        for c in &self.task.clients {
            parts[0].push(self.model.evaluate(&c.train));
            parts[1].push(self.model.evaluate(&c.valid));
            parts[2].push(self.model.evaluate(&c.test));
        }
        let [train, valid, test] = parts.map(|p| weighted(&p));
        GlobalMetrics { train, valid, test }
    }
}

fn weighted(parts: &[SplitMetrics]) -> SplitMetrics {
    let n: usize = parts.iter().map(|m| m.n).sum();
    if n == 0 {
        return SplitMetrics::default();
    }
    let mut out = SplitMetrics { n, ..Default::default() };
    for m in parts {
        let w = m.n as f64 / n as f64;
        out.loss += w * m.loss;
        out.accuracy += w * m.accuracy;
        out.f1 += w * m.f1;
    }
    if !out.loss.is_finite() || out.loss > LOSS_CAP {
        out.loss = LOSS_CAP;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CourseOutcome {
    pub final_report: RoundReport,
    pub reports: Vec<RoundReport>,
    pub diverged: bool,
}

/// Trains `cfg` for `b.rounds` rounds, evaluating after every round.
pub fn run_course(
    task: &FederatedDataset,
    space: &SearchSpace,
    algorithm: Algorithm,
    cfg: &HyperConfig,
    b: FidelityVector,
    seed: u64,
) -> Result<CourseOutcome> {
    space.check_algorithm(algorithm)?;
    space.validate(cfg)?;
    let config = decode_config(space, cfg);
    let mut course = Course::new(task, algorithm, config, b.sample_rate, seed)?;
    let mut planner = FixedPlanner(config.client);
    let mut reports = Vec::with_capacity(b.rounds as usize);
    for _ in 0..b.rounds {
        reports.push(course.step(&mut planner, true)?);
    }
    let final_report = reports.last().cloned().unwrap_or_else(|| course.snapshot());
    Ok(CourseOutcome {
        final_report,
        diverged: course.diverged(),
        reports,
    })
}

/// Trains once up to the largest of `rounds` and returns global metrics at
/// each requested round count (0 is the initial model), in ascending order.
/// Results equal those of separate [`run_course`] calls.
pub fn run_course_at(
    task: &FederatedDataset,
    algorithm: Algorithm,
    config: DecodedConfig,
    sample_rate: f64,
    rounds: &[u32],
    seed: u64,
) -> Result<(Vec<(u32, GlobalMetrics)>, bool)> {
    let mut wanted: Vec<u32> = rounds.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let mut course = Course::new(task, algorithm, config, sample_rate, seed)?;
    let mut planner = FixedPlanner(config.client);
    let mut out = Vec::with_capacity(wanted.len());
    for &r in &wanted {
        while course.round() < r {
            course.step(&mut planner, false)?;
        }
        out.push((r, course.metrics()));
    }
    Ok((out, course.diverged()))
}
