//! Black-box evaluation `f(λ, b)` served from raw simulation, a lookup
//! table, or a surrogate forest fitted on the table.

mod forest;
mod surrogate;
mod table;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use forest::{Encoding, Forest, Tree, TreeNode};
pub use surrogate::{fit_surrogate, Surrogate, SurrogateFit, FOREST_DEPTHS, FOREST_SIZES};
pub use table::{generate_table, quantize, LookupTable, TableMeta, TableSpec};

use crate::dataflow::FederatedDataset;
use crate::engine::{decode_config, run_course_at, GlobalMetrics};
use crate::error::{Error, Result};
use crate::rng;
use crate::space::{Algorithm, FidelityVector, HyperConfig, SearchSpace};
use crate::sysmodel::{
    course_time, payload_size_for, round_time, sampled_course_time, BudgetLedger, SystemConfig,
    SystemModelParams,
};

/// Column names of the nine metrics, in storage order.
pub const METRIC_NAMES: [&str; 9] = [
    "train_loss",
    "valid_loss",
    "test_loss",
    "train_acc",
    "valid_acc",
    "test_acc",
    "train_f1",
    "valid_f1",
    "test_f1",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_loss: f64,
    pub valid_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
    pub train_f1: f64,
    pub valid_f1: f64,
    pub test_f1: f64,
}

impl Metrics {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.train_loss,
            self.valid_loss,
            self.test_loss,
            self.train_acc,
            self.valid_acc,
            self.test_acc,
            self.train_f1,
            self.valid_f1,
            self.test_f1,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Metrics {
            train_loss: a[0],
            valid_loss: a[1],
            test_loss: a[2],
            train_acc: a[3],
            valid_acc: a[4],
            test_acc: a[5],
            train_f1: a[6],
            valid_f1: a[7],
            test_f1: a[8],
        }
    }

    /// Element-wise mean.
    pub fn mean(items: &[Metrics]) -> Metrics {
        let mut acc = [0.0; 9];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.to_array()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        Metrics::from_array(acc.map(|a| a / n))
    }
}

impl From<GlobalMetrics> for Metrics {
    fn from(g: GlobalMetrics) -> Self {
        Metrics {
            train_loss: g.train.loss,
            valid_loss: g.valid.loss,
            test_loss: g.test.loss,
            train_acc: g.train.accuracy,
            valid_acc: g.valid.accuracy,
            test_acc: g.test.accuracy,
            train_f1: g.train.f1,
            valid_f1: g.valid.f1,
            test_f1: g.test.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metrics: Metrics,
    /// Fidelity actually evaluated; fewer rounds than requested when the
    /// budget forced truncation.
    pub fidelity: FidelityVector,
    pub truncated: bool,
    pub elapsed_seconds: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Raw,
    Tabular,
    Surrogate,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Raw => "raw",
            Mode::Tabular => "tabular",
            Mode::Surrogate => "surrogate",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(Mode::Raw),
            "tabular" => Ok(Mode::Tabular),
            "surrogate" => Ok(Mode::Surrogate),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Raw(Arc<FederatedDataset>),
    Tabular(Arc<LookupTable>),
    Surrogate(Arc<Surrogate>),
}

/// Seed of the course behind `(seed, cfg)`. Tables store runs with seeds
/// `0..n_seeds`, so a raw evaluation with one of those reproduces its row.
pub fn course_seed(seed: u64, cfg: &HyperConfig) -> u64 {
    rng::mix(seed, rng::hash_f64s(&cfg.values))
}

/// One benchmark: a task, an FL algorithm, its search space and a backend.
#[derive(Debug, Clone)]
pub struct BenchmarkHandle {
    pub task: String,
    pub algorithm: Algorithm,
    pub space: SearchSpace,
    pub n_clients: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub system: SystemConfig,
    pub backend: Backend,
}

impl BenchmarkHandle {
    pub fn raw(
        task: &str,
        data: Arc<FederatedDataset>,
        algorithm: Algorithm,
        space: SearchSpace,
        system: SystemConfig,
    ) -> Result<Self> {
        space.check_algorithm(algorithm)?;
        system.validate()?;
        Ok(BenchmarkHandle {
            task: task.to_string(),
            algorithm,
            n_clients: data.n_clients(),
            n_features: data.n_features(),
            n_classes: data.n_classes(),
            space,
            system,
            backend: Backend::Raw(data),
        })
    }

    pub fn tabular(table: Arc<LookupTable>, system: SystemConfig) -> Result<Self> {
        system.validate()?;
        let m = &table.meta;
        Ok(BenchmarkHandle {
            task: m.task.clone(),
            algorithm: m.algorithm,
            space: m.space.clone(),
            n_clients: m.n_clients,
            n_features: m.n_features,
            n_classes: m.n_classes,
            system,
            backend: Backend::Tabular(table),
        })
    }

    pub fn surrogate(model: Arc<Surrogate>, system: SystemConfig) -> Result<Self> {
        system.validate()?;
        let m = &model.meta;
        Ok(BenchmarkHandle {
            task: m.task.clone(),
            algorithm: m.algorithm,
            space: m.space.clone(),
            n_clients: m.n_clients,
            n_features: m.n_features,
            n_classes: m.n_classes,
            system,
            backend: Backend::Surrogate(model),
        })
    }

    pub fn mode(&self) -> Mode {
        match self.backend {
            Backend::Raw(_) => Mode::Raw,
            Backend::Tabular(_) => Mode::Tabular,
            Backend::Surrogate(_) => Mode::Surrogate,
        }
    }

    /// The federated dataset behind a raw handle.
    pub fn dataset(&self) -> Option<&Arc<FederatedDataset>> {
        match &self.backend {
            Backend::Raw(d) => Some(d),
            _ => None,
        }
    }

    /// Round rounds supported by a tabular handle, ascending.
    pub fn table_rounds(&self) -> Option<&[u32]> {
        match &self.backend {
            Backend::Tabular(t) => Some(&t.spec.rounds),
            _ => None,
        }
    }

    /// System parameters with payload sizes derived from the model of `cfg`.
    pub fn system_params(&self, cfg: &HyperConfig) -> SystemModelParams {
        let arch = decode_config(&self.space, cfg).architecture;
        let payload = payload_size_for(arch.n_params(self.n_features, self.n_classes));
        self.system.resolve(payload)
    }

    /// Simulated seconds of one round of `cfg` at `sample_rate`.
    pub fn round_cost(&self, cfg: &HyperConfig, sample_rate: f64) -> f64 {
        let n = FidelityVector::new(1, sample_rate).sampled_clients(self.n_clients);
        round_time(&self.system_params(cfg), n)
    }

    /// Simulated seconds of a full course of `cfg` at fidelity `b`.
    pub fn cost(&self, cfg: &HyperConfig, b: &FidelityVector) -> f64 {
        course_time(&self.system_params(cfg), self.n_clients, b)
    }

    /// Evaluates without touching any budget.
    pub fn query(&self, cfg: &HyperConfig, b: &FidelityVector, seed: u64) -> Result<(Metrics, bool)> {
        self.space.validate(cfg)?;
        if !(b.sample_rate > 0.0 && b.sample_rate <= 1.0) {
            return Err(Error::invalid(format!("sample_rate {} outside (0, 1]", b.sample_rate)));
        }
        match &self.backend {
            Backend::Raw(data) => {
                let config = decode_config(&self.space, cfg);
                let (at, diverged) = run_course_at(
                    data,
                    self.algorithm,
                    config,
                    b.sample_rate,
                    &[b.rounds],
                    course_seed(seed, cfg),
                )?;
                Ok((at[0].1.into(), diverged))
            }
            Backend::Tabular(t) => Ok((t.lookup(cfg, b)?, false)),
            Backend::Surrogate(s) => Ok((s.predict(cfg, b), false)),
        }
    }

    /// Evaluates `cfg` at `b` and charges the simulated course time to
    /// `ledger`. When the course does not fit in the remaining budget the
    /// number of rounds is cut to what fits (snapped down to the table's
    /// round grid in tabular mode).
    pub fn evaluate(
        &self,
        ledger: &mut BudgetLedger,
        cfg: &HyperConfig,
        b: &FidelityVector,
        seed: u64,
    ) -> Result<EvalResult> {
        if ledger.is_exhausted() {
            return Err(Error::BudgetExhausted);
        }
        self.space.validate(cfg)?;
        let per_round = self.round_cost(cfg, b.sample_rate);
        let affordable = ledger.affordable_rounds(per_round);
        let mut fidelity = *b;
        let truncated = affordable < b.rounds;
        if truncated {
            fidelity.rounds = match self.table_rounds() {
                Some(grid) => grid.iter().rev().copied().find(|&r| r <= affordable).unwrap_or(0),
                None => affordable,
            };
            if fidelity.rounds == 0 {
                return Err(Error::BudgetExhausted);
            }
        }
        let (metrics, diverged) = self.query(cfg, &fidelity, seed)?;
        let params = self.system_params(cfg);
        let elapsed = if self.system.sampled_stragglers {
            sampled_course_time(&params, self.n_clients, &fidelity, rng::mix(course_seed(seed, cfg), 0x57A6))
        } else {
            course_time(&params, self.n_clients, &fidelity)
        };
        ledger.charge(elapsed)?;
        Ok(EvalResult {
            metrics,
            fidelity,
            truncated,
            elapsed_seconds: elapsed,
            diverged,
        })
    }
}
