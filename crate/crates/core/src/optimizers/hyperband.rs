//! Successive halving, Hyperband and their model-based variants.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::de::{crossover, mutant};
use super::kde::{self, KdeParams};
use super::Runner;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// How [`sha_schedule`] spreads the round budget over stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleRule {
    /// `r_i = r_0 η^i` with the largest `r_0` that fits.
    Geometric,
    /// Nearly flat stages growing by one round each; the last stage absorbs
    /// the remainder.
    #[default]
    OneShot,
}

/// Stage schedule `(n_i, r_i)` with `n_i = floor(n0 / η^i)` and
/// `Σ n_i r_i ≤ total_rounds`.
pub fn sha_schedule(
    n0: usize,
    eta: usize,
    stages: usize,
    total_rounds: u32,
    rule: ScheduleRule,
) -> Result<Vec<(usize, u32)>> {
    if eta < 2 || stages == 0 {
        return Err(Error::InfeasibleSchedule(format!(
            "need eta >= 2 and at least one stage, got eta={eta}, stages={stages}"
        )));
    }
    let top = eta
        .checked_pow(stages as u32 - 1)
        .ok_or_else(|| Error::InfeasibleSchedule("eta^(stages-1) overflows".into()))?;
    if n0 < top {
        return Err(Error::InfeasibleSchedule(format!(
            "{n0} configurations cannot be halved {} times by {eta}",
            stages - 1
        )));
    }
    let n: Vec<usize> = (0..stages).map(|i| n0 / eta.pow(i as u32)).collect();
    let total = total_rounds as i64;
    let rounds: Vec<i64> = match rule {
        ScheduleRule::Geometric => {
            let weight: i64 = n
                .iter()
                .enumerate()
                .map(|(i, &ni)| (ni * eta.pow(i as u32)) as i64)
                .sum();
            let r0 = total / weight;
            (0..stages).map(|i| r0 * eta.pow(i as u32) as i64).collect()
        }
        ScheduleRule::OneShot => {
            let sum_n: i64 = n.iter().map(|&x| x as i64).sum();
            let offsets: i64 = n.iter().enumerate().map(|(i, &ni)| (i * ni) as i64).sum();
            let r0 = (total - offsets).div_euclid(sum_n);
            let mut r: Vec<i64> = (0..stages).map(|i| r0 + i as i64).collect();
            let used: i64 = n[..stages - 1].iter().zip(&r).map(|(&ni, &ri)| ni as i64 * ri).sum();
            r[stages - 1] = (total - used).div_euclid(n[stages - 1] as i64);
            r
        }
    };
    if rounds.iter().any(|&r| r < 1) {
        return Err(Error::InfeasibleSchedule(format!(
            "{total_rounds} rounds cannot fund {stages} stages starting with {n0} configurations"
        )));
    }
    Ok(n.into_iter().zip(rounds.into_iter().map(|r| r as u32)).collect())
}

/// Total rounds of a schedule.
pub fn schedule_cost(schedule: &[(usize, u32)]) -> u64 {
    schedule.iter().map(|&(n, r)| n as u64 * r as u64).sum()
}

/// Hyperband brackets for budgets in `[r_min, r_max]`, most aggressive first.
pub fn hb_brackets(r_min: u32, r_max: u32, eta: usize) -> Result<Vec<Vec<(usize, u32)>>> {
    if eta < 2 || r_min == 0 || r_min > r_max {
        return Err(Error::InfeasibleSchedule(format!(
            "hyperband needs eta >= 2 and 1 <= r_min <= r_max, got eta={eta}, r_min={r_min}, r_max={r_max}"
        )));
    }
    let ratio = r_max as f64 / r_min as f64;
    let s_max = (ratio.ln() / (eta as f64).ln() + 1e-9).floor() as u32;
    Ok((0..=s_max)
        .rev()
        .map(|s| {
            let n = ((s_max + 1) as usize * eta.pow(s)).div_ceil(s as usize + 1);
            (0..=s)
                .map(|i| {
                    let ni = n / eta.pow(i);
                    let ri = (r_max as f64 / eta.pow(s - i) as f64).round().max(1.0) as u32;
                    (ni, ri)
                })
                .collect()
        })
        .collect())
}

/// Chooses the configurations a bracket evaluates.
pub trait BracketPolicy {
    /// A fresh configuration for the first stage, evaluated at `rounds`.
    fn propose(&mut self, runner: &Runner<'_>, rounds: u32, r: &mut Rng) -> Vec<f64>;

    fn observe(&mut self, _u: &[f64], _rounds: u32, _loss: f64) {}

    /// Configurations for the next stage given the current stage ranked best
    /// first. Plain successive halving keeps the top `n_next`.
    fn promote(
        &mut self,
        ranked: &[(Vec<f64>, f64)],
        n_next: usize,
        _rounds: u32,
        _runner: &Runner<'_>,
        _r: &mut Rng,
    ) -> Vec<Vec<f64>> {
        ranked.iter().take(n_next).map(|(u, _)| u.clone()).collect()
    }
}

/// Runs one successive-halving bracket. Returns `false` once the budget is gone.
pub fn run_bracket(
    runner: &mut Runner<'_>,
    schedule: &[(usize, u32)],
    policy: &mut dyn BracketPolicy,
    r: &mut Rng,
) -> Result<bool> {
    let mut current: Vec<Vec<f64>> = Vec::new();
    for (stage, &(n, rounds)) in schedule.iter().enumerate() {
        let rounds = runner.snap_rounds(rounds);
        let mut results: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
        if stage == 0 {
            for _ in 0..n {
                let u = policy.propose(runner, rounds, r);
                let Some(loss) = runner.evaluate(&u, rounds)? else { return Ok(false) };
                policy.observe(&u, rounds, loss);
                results.push((u, loss));
            }
        } else {
            for u in current.drain(..) {
                let Some(loss) = runner.evaluate(&u, rounds)? else { return Ok(false) };
                policy.observe(&u, rounds, loss);
                results.push((u, loss));
            }
        }
        // Stable sort: ties keep the earlier trial first.
        results.sort_by(|a, b| a.1.total_cmp(&b.1));
        if let Some(&(n_next, r_next)) = schedule.get(stage + 1) {
            let r_next = runner.snap_rounds(r_next);
            current = policy.promote(&results, n_next.min(results.len()), r_next, runner, r);
        }
    }
    Ok(true)
}

/// Uniform random first-stage proposals.
pub struct RandomPolicy;

impl BracketPolicy for RandomPolicy {
    fn propose(&mut self, runner: &Runner<'_>, _rounds: u32, r: &mut Rng) -> Vec<f64> {
        runner.codec.random(r)
    }
}

/// Kernel-density proposals fitted on the largest budget with enough data.
pub struct KdePolicy {
    pub params: KdeParams,
    by_rounds: BTreeMap<u32, Vec<(Vec<f64>, f64)>>,
}

impl KdePolicy {
    pub fn new(params: KdeParams) -> Self {
        KdePolicy {
            params,
            by_rounds: BTreeMap::new(),
        }
    }
}

impl BracketPolicy for KdePolicy {
    fn propose(&mut self, runner: &Runner<'_>, _rounds: u32, r: &mut Rng) -> Vec<f64> {
        let need = kde::min_points(runner.codec.len());
        let empty = Vec::new();
        let obs = self
            .by_rounds
            .values()
            .rev()
            .find(|v| v.len() >= need)
            .unwrap_or(&empty);
        kde::propose(obs, &runner.codec, &self.params, r)
    }

    fn observe(&mut self, u: &[f64], rounds: u32, loss: f64) {
        self.by_rounds.entry(rounds).or_default().push((u.to_vec(), loss));
    }
}

/// Differential evolution across budgets: each round count keeps its own
/// population; first-stage candidates are mutants of that population and
/// promoted candidates are mutants of the promoted parents, each crossed
/// with a target it replaces when better.
pub struct DehbPolicy {
    pub population: usize,
    pub f: f64,
    pub cr: f64,
    pops: BTreeMap<u32, Vec<(Vec<f64>, f64)>>,
    cursor: BTreeMap<u32, usize>,
    pending: VecDeque<Option<usize>>,
}

impl DehbPolicy {
    pub fn new(population: usize, f: f64, cr: f64) -> Self {
        DehbPolicy {
            population: population.max(4),
            f,
            cr,
            pops: BTreeMap::new(),
            cursor: BTreeMap::new(),
            pending: VecDeque::new(),
        }
    }

    fn next_target(&mut self, rounds: u32) -> usize {
        let len = self.pops[&rounds].len();
        let c = self.cursor.entry(rounds).or_insert(0);
        let t = *c % len;
        *c += 1;
        t
    }
}

impl BracketPolicy for DehbPolicy {
    fn propose(&mut self, runner: &Runner<'_>, rounds: u32, r: &mut Rng) -> Vec<f64> {
        let full = self.pops.get(&rounds).is_some_and(|p| p.len() >= self.population);
        if !full {
            self.pending.push_back(None);
            return runner.codec.random(r);
        }
        let t = self.next_target(rounds);
        let pop = &self.pops[&rounds];
        let pool: Vec<&[f64]> = pop.iter().map(|(u, _)| u.as_slice()).collect();
        let m = mutant(&pool, Some(t), self.f, r);
        let trial = crossover(&pop[t].0, &m, self.cr, r);
        self.pending.push_back(Some(t));
        trial
    }

    fn observe(&mut self, u: &[f64], rounds: u32, loss: f64) {
        let target = self.pending.pop_front().flatten();
        let pop = self.pops.entry(rounds).or_default();
        match target {
            Some(t) if t < pop.len() => {
                if loss <= pop[t].1 {
                    pop[t] = (u.to_vec(), loss);
                }
            }
            _ => {
                if pop.len() < self.population {
                    pop.push((u.to_vec(), loss));
                } else if let Some(worst) = (0..pop.len()).max_by(|&a, &b| pop[a].1.total_cmp(&pop[b].1)) {
                    if loss < pop[worst].1 {
                        pop[worst] = (u.to_vec(), loss);
                    }
                }
            }
        }
    }

    fn promote(
        &mut self,
        ranked: &[(Vec<f64>, f64)],
        n_next: usize,
        rounds: u32,
        _runner: &Runner<'_>,
        r: &mut Rng,
    ) -> Vec<Vec<f64>> {
        let parents: Vec<Vec<f64>> = ranked.iter().take(n_next).map(|(u, _)| u.clone()).collect();
        let full = self.pops.get(&rounds).is_some_and(|p| p.len() >= self.population);
        if !full {
            self.pending.extend(std::iter::repeat_n(None, parents.len()));
            return parents;
        }
        let mut out = Vec::with_capacity(parents.len());
        for _ in 0..parents.len() {
            let t = self.next_target(rounds);
            let pop = &self.pops[&rounds];
            let mut pool: Vec<&[f64]> = parents.iter().map(|u| u.as_slice()).collect();
            if pool.len() < 3 {
                pool.extend(pop.iter().map(|(u, _)| u.as_slice()));
            }
            let m = mutant(&pool, None, self.f, r);
            out.push(crossover(&pop[t].0, &m, self.cr, r));
            self.pending.push_back(Some(t));
        }
        out
    }
}

/// Repeats brackets in order until the budget runs out.
pub fn run_brackets(
    runner: &mut Runner<'_>,
    brackets: &[Vec<(usize, u32)>],
    policy: &mut dyn BracketPolicy,
    r: &mut Rng,
    repeat: bool,
) -> Result<()> {
    if brackets.is_empty() {
        return Ok(());
    }
    loop {
        for b in brackets {
            if !run_bracket(runner, b, policy, r)? || runner.finished() {
                return Ok(());
            }
        }
        if !repeat {
            return Ok(());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_shot_schedule_of_27_candidates() {
        let s = sha_schedule(27, 3, 3, 500, ScheduleRule::OneShot).unwrap();
        assert_eq!(s, vec![(27, 12), (9, 13), (3, 19)]);
        assert_eq!(schedule_cost(&s), 498);
    }

    #[test]
    fn geometric_schedule() {
        let s = sha_schedule(9, 3, 2, 90, ScheduleRule::Geometric).unwrap();
        assert_eq!(s, vec![(9, 5), (3, 15)]);
        assert_eq!(schedule_cost(&s), 90);
    }

    #[test]
    fn degenerate_schedule() {
        for rule in [ScheduleRule::Geometric, ScheduleRule::OneShot] {
            assert_eq!(sha_schedule(1, 3, 1, 77, rule).unwrap(), vec![(1, 77)]);
        }
    }

    #[test]
    fn infeasible_schedules() {
        assert!(matches!(
            sha_schedule(8, 3, 3, 500, ScheduleRule::OneShot),
            Err(Error::InfeasibleSchedule(_))
        ));
        assert!(matches!(
            sha_schedule(27, 3, 3, 20, ScheduleRule::Geometric),
            Err(Error::InfeasibleSchedule(_))
        ));
    }

    #[test]
    fn standard_hyperband_brackets() {
        let b = hb_brackets(1, 27, 3).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b[0], vec![(27, 1), (9, 3), (3, 9), (1, 27)]);
        assert_eq!(b[1], vec![(12, 3), (4, 9), (1, 27)]);
        assert_eq!(b[2], vec![(6, 9), (2, 27)]);
        assert_eq!(b[3], vec![(4, 27)]);
    }

    proptest::proptest! {
        #[test]
        fn schedules_fit_budget(n0 in 1usize..100, eta in 2usize..5, stages in 1usize..4, total in 1u32..2000) {
            for rule in [ScheduleRule::Geometric, ScheduleRule::OneShot] {
                if let Ok(s) = sha_schedule(n0, eta, stages, total, rule) {
                    proptest::prop_assert!(schedule_cost(&s) <= total as u64);
                    for w in s.windows(2) {
                        proptest::prop_assert_eq!(w[1].0, w[0].0 / eta);
                        proptest::prop_assert!(w[1].1 >= w[0].1);
                    }
                }
            }
        }
    }
}
