//! Simulated wall-clock cost of federated rounds and the budget ledger.
//!
//! A round costs communication plus the computation of its slowest sampled
//! client. Client compute times are i.i.d. exponential with mean `c`, so the
//! expected straggler time for `n` clients is `c * H(n)`.

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::engine::ModelParams;
use crate::error::{Error, Result};
use crate::rng;
use crate::space::FidelityVector;

pub const BYTES_PER_PARAM: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemModelParams {
    pub b_up_server: f64,
    pub b_down_client: f64,
    pub b_up_client: f64,
    pub s_down: f64,
    pub s_up: f64,
    pub c: f64,
    pub t_server: f64,
}

impl SystemModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("b_up_server", self.b_up_server),
            ("b_down_client", self.b_down_client),
            ("b_up_client", self.b_up_client),
            ("s_down", self.s_down),
            ("s_up", self.s_up),
            ("c", self.c),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || v.is_nan() {
                return Err(Error::invalid(format!("system parameter {name} must be > 0, got {v}")));
            }
        }
        if !(self.t_server >= 0.0) {
            return Err(Error::invalid("t_server must be >= 0"));
        }
        Ok(())
    }
}

/// The `[system]` block of a study config. Payload sizes default to the
/// model size when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default = "defaults::b_up")]
    pub b_up_server_mbps: f64,
    #[serde(default = "defaults::b_down")]
    pub b_down_client_mbps: f64,
    #[serde(default = "defaults::b_up")]
    pub b_up_client_mbps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_down_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_up_mb: Option<f64>,
    #[serde(default = "defaults::c")]
    pub c_seconds: f64,
    #[serde(default = "defaults::t_server")]
    pub t_server_seconds: f64,
    #[serde(default)]
    pub sampled_stragglers: bool,
}

mod defaults {
    pub fn b_up() -> f64 {
        0.25
    }
    pub fn b_down() -> f64 {
        0.75
    }
    pub fn c() -> f64 {
        1.0
    }
    pub fn t_server() -> f64 {
        0.01
    }
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            b_up_server_mbps: defaults::b_up(),
            b_down_client_mbps: defaults::b_down(),
            b_up_client_mbps: defaults::b_up(),
            s_down_mb: None,
            s_up_mb: None,
            c_seconds: defaults::c(),
            t_server_seconds: defaults::t_server(),
            sampled_stragglers: false,
        }
    }
}

impl SystemConfig {
    /// Fills in payload sizes from `payload_mb` where the config leaves them open.
    pub fn resolve(&self, payload_mb: f64) -> SystemModelParams {
        SystemModelParams {
            b_up_server: self.b_up_server_mbps,
            b_down_client: self.b_down_client_mbps,
            b_up_client: self.b_up_client_mbps,
            s_down: self.s_down_mb.unwrap_or(payload_mb),
            s_up: self.s_up_mb.unwrap_or(payload_mb),
            c: self.c_seconds,
            t_server: self.t_server_seconds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve(1.0).validate()
    }
}

/// `c * (1 + 1/2 + ... + 1/n)`.
pub fn expected_straggler_time(n: usize, c: f64) -> f64 {
    c * (1..=n).map(|i| 1.0 / i as f64).sum::<f64>()
}

fn comm_time(p: &SystemModelParams, n: usize) -> f64 {
    let down = (n as f64 * p.s_down / p.b_up_server).max(p.s_down / p.b_down_client);
    down + p.s_up / p.b_up_client
}

pub fn round_time(p: &SystemModelParams, n_sampled: usize) -> f64 {
    let n = n_sampled.max(1);
    comm_time(p, n) + expected_straggler_time(n, p.c) + p.t_server
}

pub fn course_time(p: &SystemModelParams, n_clients: usize, b: &FidelityVector) -> f64 {
    if b.rounds == 0 {
        return 0.0;
    }
    b.rounds as f64 * round_time(p, b.sampled_clients(n_clients))
}

/// Round time with the straggler drawn as the maximum of `n` exponential
/// compute times instead of its expectation.
pub fn sampled_round_time(p: &SystemModelParams, n_sampled: usize, r: &mut rng::Rng) -> f64 {
    let n = n_sampled.max(1);
    let exp = Exp::new(1.0 / p.c).expect("c > 0");
    let straggler = (0..n).map(|_| exp.sample(r)).fold(0.0, f64::max);
    comm_time(p, n) + straggler + p.t_server
}

pub fn sampled_course_time(p: &SystemModelParams, n_clients: usize, b: &FidelityVector, seed: u64) -> f64 {
    let mut r = rng::rng(seed);
    let n = b.sampled_clients(n_clients);
    (0..b.rounds).map(|_| sampled_round_time(p, n, &mut r)).sum()
}

/// Size in MB of a model update (4-byte floats).
pub fn payload_size(model: &ModelParams) -> f64 {
    payload_size_for(model.n_params())
}

pub fn payload_size_for(n_params: usize) -> f64 {
    n_params as f64 * BYTES_PER_PARAM / (1u64 << 20) as f64
}

/// Simulated seconds available to an optimizer and how many it has used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    limit: f64,
    spent: f64,
}

impl BudgetLedger {
    pub fn new(limit: f64) -> Result<Self> {
        if !(limit >= 0.0) || limit.is_infinite() {
            return Err(Error::invalid(format!("budget limit must be finite and >= 0, got {limit}")));
        }
        Ok(BudgetLedger { limit, spent: 0.0 })
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn remaining(&self) -> f64 {
        (self.limit - self.spent).max(0.0)
    }

    pub fn is_exhausted(&self) -> bool {
        self.spent >= self.limit
    }

    /// Records `seconds` of simulated time. Fails once the budget is used up;
    /// a charge that starts within budget is always accepted.
    pub fn charge(&mut self, seconds: f64) -> Result<()> {
        if self.is_exhausted() {
            return Err(Error::BudgetExhausted);
        }
        if !(seconds >= 0.0) {
            return Err(Error::invalid(format!("cannot charge {seconds} seconds")));
        }
        self.spent += seconds;
        Ok(())
    }

    /// Largest number of rounds of cost `per_round` that fit in the remainder.
    pub fn affordable_rounds(&self, per_round: f64) -> u32 {
        if self.is_exhausted() {
            return 0;
        }
        if per_round <= 0.0 {
            return u32::MAX;
        }
        let r = (self.remaining() / per_round + 1e-9).floor();
        r.min(u32::MAX as f64) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Architecture;
    use proptest::prelude::*;

    fn bad_network(c: f64, t_server: f64) -> SystemModelParams {
        SystemModelParams {
            b_up_server: 0.25,
            b_down_client: 0.75,
            b_up_client: 0.25,
            s_down: 1.0,
            s_up: 1.0,
            c,
            t_server,
        }
    }

    /// Monte Carlo mean and standard error of the max of `n` Exp(mean c).
    fn straggler_oracle(n: usize, c: f64, draws: usize, seed: u64) -> (f64, f64) {
        let mut r = rng::rng(seed);
        let exp = Exp::new(1.0 / c).unwrap();
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let m = (0..n).map(|_| exp.sample(&mut r)).fold(0.0, f64::max);
            s += m;
            s2 += m * m;
        }
        let mean = s / draws as f64;
        let var = s2 / draws as f64 - mean * mean;
        (mean, (var / draws as f64).sqrt())
    }

    #[test]
    fn straggler_examples() {
        assert_eq!(expected_straggler_time(1, 2.0), 2.0);
        assert!((expected_straggler_time(4, 1.0) - 25.0 / 12.0).abs() < 1e-12);
        assert!((expected_straggler_time(2, 3.0) - 4.5).abs() < 1e-12);
        let (m4, _) = straggler_oracle(4, 1.0, 1_000_000, 1);
        assert!((m4 - expected_straggler_time(4, 1.0)).abs() < 1e-2);
        let (m2, _) = straggler_oracle(2, 3.0, 1_000_000, 2);
        assert!((m2 - 4.5).abs() < 1e-2);
    }

    #[test]
    fn straggler_matches_monte_carlo_within_three_se() {
        for (k, n) in [1usize, 2, 4, 8, 32].into_iter().enumerate() {
            let (mean, se) = straggler_oracle(n, 1.5, 1_000_000, 100 + k as u64);
            let expect = expected_straggler_time(n, 1.5);
            assert!((mean - expect).abs() < 3.0 * se, "n={n}: {mean} vs {expect} (se {se})");
        }
    }

    #[test]
    fn round_time_examples() {
        assert!((round_time(&bad_network(0.0, 0.0), 10) - 44.0).abs() < 1e-12);
        let fast = SystemModelParams {
            b_up_server: 1e9,
            b_down_client: 1e9,
            b_up_client: 1e9,
            ..bad_network(0.7, 0.05)
        };
        assert!((round_time(&fast, 1) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn course_time_examples() {
        let p = bad_network(1.0, 0.01);
        assert_eq!(course_time(&p, 10, &FidelityVector::new(0, 1.0)), 0.0);
        let tau = round_time(&p, 10);
        assert!((course_time(&p, 10, &FidelityVector::new(10, 1.0)) - 10.0 * tau).abs() < 1e-9);
        assert!(course_time(&p, 10, &FidelityVector::new(5, 0.5)) <= course_time(&p, 10, &FidelityVector::new(5, 1.0)));
    }

    #[test]
    fn payload_examples() {
        let lr = ModelParams::init(Architecture::Lr, 10, 2, 0);
        assert_eq!(payload_size(&lr), 22.0 * 4.0 / 1048576.0);
        let mlp = ModelParams::init(Architecture::Mlp { depth: 1, width: 16 }, 10, 2, 0);
        assert_eq!(payload_size(&mlp), 210.0 * 4.0 / 1048576.0);
        let n16 = Architecture::Mlp { depth: 2, width: 16 }.n_params(10, 2);
        let n32 = Architecture::Mlp { depth: 2, width: 32 }.n_params(10, 2);
        assert!(payload_size_for(n32) > 2.0 * payload_size_for(n16));
    }

    #[test]
    fn ledger_rejects_after_exhaustion() {
        let mut l = BudgetLedger::new(10.0).unwrap();
        assert_eq!(l.affordable_rounds(3.0), 3);
        l.charge(9.0).unwrap();
        l.charge(4.0).unwrap();
        assert!(l.is_exhausted());
        assert!(matches!(l.charge(1.0), Err(Error::BudgetExhausted)));
        assert_eq!(l.affordable_rounds(1.0), 0);
    }

    #[test]
    fn config_keys_and_defaults() {
        let cfg: SystemConfig = toml::from_str("c_seconds = 2.0\ns_up_mb = 0.5\nsampled_stragglers = true").unwrap();
        assert_eq!(cfg.b_up_server_mbps, 0.25);
        assert_eq!(cfg.b_down_client_mbps, 0.75);
        let p = cfg.resolve(0.1);
        assert_eq!((p.s_down, p.s_up, p.c, p.t_server), (0.1, 0.5, 2.0, 0.01));
        assert!(toml::from_str::<SystemConfig>("bandwidth = 1.0").is_err());
    }

    #[test]
    fn sampled_mode_is_seeded_and_centered() {
        let p = bad_network(1.0, 0.0);
        let b = FidelityVector::new(20_000, 1.0);
        let a = sampled_course_time(&p, 4, &b, 3);
        assert_eq!(a, sampled_course_time(&p, 4, &b, 3));
        let expect = course_time(&p, 4, &b);
        assert!((a - expect).abs() / expect < 0.01);
    }

    proptest! {
        #[test]
        fn round_time_monotone(
            n in 1usize..64,
            bw in 0.01f64..10.0,
            s in 0.001f64..5.0,
            c in 0.0f64..5.0,
            ts in 0.0f64..1.0,
            f in 1.01f64..3.0,
        ) {
            let p = SystemModelParams { b_up_server: bw, b_down_client: bw * 2.0, b_up_client: bw, s_down: s, s_up: s, c, t_server: ts };
            let t = round_time(&p, n);
            prop_assert!(round_time(&p, n + 1) >= t);
            let q = SystemModelParams { s_down: s * f, ..p };
            prop_assert!(round_time(&q, n) >= t);
            let q = SystemModelParams { s_up: s * f, ..p };
            prop_assert!(round_time(&q, n) >= t);
            let q = SystemModelParams { c: c * f + 0.01, ..p };
            prop_assert!(round_time(&q, n) >= t);
            let q = SystemModelParams { t_server: ts * f + 0.01, ..p };
            prop_assert!(round_time(&q, n) >= t);
            let q = SystemModelParams { b_up_server: bw * f, ..p };
            prop_assert!(round_time(&q, n) <= t);
            let q = SystemModelParams { b_down_client: bw * f, ..p };
            prop_assert!(round_time(&q, n) <= t);
            let q = SystemModelParams { b_up_client: bw * f, ..p };
            prop_assert!(round_time(&q, n) <= t);
        }

        #[test]
        fn ledger_overshoot_bounded_by_one_charge(costs in proptest::collection::vec(0.0f64..5.0, 1..40)) {
            let mut l = BudgetLedger::new(20.0).unwrap();
            let mut max_cost: f64 = 0.0;
            for c in costs {
                if l.charge(c).is_ok() {
                    max_cost = max_cost.max(c);
                }
            }
            prop_assert!(l.spent() <= l.limit() + max_cost);
        }
    }
}
