//! Study statistics (best-seen curves, mean ranks, sign tests, ECDFs of
//! normalized regret) and study orchestration.

mod study;

pub use study::{
    load_study_config, read_trial_log, run_study, table_fidelity, write_summaries, write_trial_log,
    CellRecord, StudyConfig, StudyOutcome, StudyRecord, TableConfig, TaskSource, TaskSpec,
    SCHEMA_VERSION,
};

use crate::error::{Error, Result};
use crate::optimizers::Trial;

/// `n` log-spaced times from `t_first` to `t_max`, both included.
pub fn time_grid(t_first: f64, t_max: f64, n: usize) -> Vec<f64> {
    if n <= 1 || !(t_first > 0.0) || t_first >= t_max {
        return vec![t_max];
    }
    let (a, b) = (t_first.ln(), t_max.ln());
    let mut g: Vec<f64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect();
    g[0] = t_first;
    g[n - 1] = t_max;
    g
}

/// Incumbent validation loss at each time of `t_grid`; `+inf` before the
/// first trial completes. A trial takes over only when it ran for at least
/// as many rounds as the incumbent and reached a lower loss.
pub fn best_seen(trials: &[Trial], t_grid: &[f64]) -> Vec<f64> {
    let mut order: Vec<&Trial> = trials.iter().collect();
    order.sort_by(|a, b| a.sim_time.total_cmp(&b.sim_time));
    let mut out = Vec::with_capacity(t_grid.len());
    let mut inc: Option<(u32, f64)> = None;
    let mut next = 0;
    for &t in t_grid {
        while next < order.len() && order[next].sim_time <= t {
            let tr = order[next];
            let (r, l) = (tr.rounds(), tr.loss());
            if inc.is_none_or(|(ir, il)| r >= ir && l < il) {
                inc = Some((r, l));
            }
            next += 1;
        }
        out.push(inc.map_or(f64::INFINITY, |(_, l)| l));
    }
    out
}

/// Ranks of `values` (1 = smallest); tied values share the mean of the
/// ranks they cover.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mean rank over time. `curves[o][g]` is optimizer `o`'s best-seen curve on
/// benchmark instance `g`; the result holds one trajectory per optimizer.
pub fn mean_rank(curves: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    if curves.len() < 2 {
        return Err(Error::invalid("mean rank needs at least two optimizers"));
    }
    let groups = curves[0].len();
    if groups == 0 {
        return Err(Error::invalid("mean rank needs at least one benchmark instance"));
    }
    let len = curves[0][0].len();
    if curves
        .iter()
        .any(|c| c.len() != groups || c.iter().any(|g| g.len() != len))
    {
        return Err(Error::ShapeMismatch("best-seen curves are not aligned".into()));
    }
    let k = curves.len();
    let mut out = vec![vec![0.0; len]; k];
    for g in 0..groups {
        for t in 0..len {
            let vals: Vec<f64> = curves.iter().map(|c| c[g][t]).collect();
            for (o, r) in average_ranks(&vals).into_iter().enumerate() {
                out[o][t] += r;
            }
        }
    }
    for row in &mut out {
        for v in row.iter_mut() {
            *v /= groups as f64;
        }
    }
    Ok(out)
}

/// One-sided exact sign test: `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
/// Ties are dropped.
pub fn sign_test(wins: u64, _ties: u64, losses: u64) -> Result<f64> {
    let n = wins + losses;
    if n == 0 {
        return Err(Error::invalid("sign test needs at least one win or loss"));
    }
    if n <= 120 {
        let mut c: u128 = 1;
        let mut tail: u128 = 0;
        for k in 0..=n {
            if k >= wins {
                tail += c;
            }
            c = c * (n - k) as u128 / (k + 1) as u128;
        }
        return Ok(tail as f64 / 2f64.powi(n as i32));
    }
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut lc = 0.0;
    let mut terms = Vec::with_capacity((n - wins + 1) as usize);
    for k in 0..=n {
        if k >= wins {
            terms.push(lc - ln2n);
        }
        lc += ((n - k) as f64).ln() - ((k + 1) as f64).ln();
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp().min(1.0))
}

/// Step points `(regret, fraction <= regret)` of the empirical CDF of the
/// normalized regrets `(v - min) / (max - min)`.
pub fn ecdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) || lo == hi {
        return Err(Error::invalid("ECDF needs at least two distinct finite values"));
    }
    let mut r: Vec<f64> = values.iter().map(|v| (v - lo) / (hi - lo)).collect();
    r.sort_by(f64::total_cmp);
    let n = r.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in r.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{EvalResult, Metrics};
    use crate::space::{FidelityVector, HyperConfig};
    use proptest::prelude::*;

    fn trial(t: f64, rounds: u32, loss: f64) -> Trial {
        Trial {
            index: 0,
            config: HyperConfig::new(vec![]),
            requested_rounds: rounds,
            result: EvalResult {
                metrics: Metrics {
                    valid_loss: loss,
                    ..Metrics::from_array([0.0; 9])
                },
                fidelity: FidelityVector::new(rounds, 1.0),
                truncated: false,
                elapsed_seconds: 0.0,
                diverged: false,
            },
            sim_time: t,
        }
    }

    #[test]
    fn best_seen_examples() {
        assert_eq!(best_seen(&[trial(5.0, 1, 0.3)], &[1.0, 10.0]), vec![f64::INFINITY, 0.3]);
        let ts = [trial(1.0, 1, 0.5), trial(2.0, 1, 0.7)];
        assert_eq!(best_seen(&ts, &[1.0, 2.0, 3.0]), vec![0.5, 0.5, 0.5]);
        // A lower-fidelity trial cannot displace a higher-fidelity incumbent.
        let ts = [trial(1.0, 9, 0.5), trial(2.0, 1, 0.1), trial(3.0, 9, 0.4)];
        assert_eq!(best_seen(&ts, &[1.5, 2.5, 3.5]), vec![0.5, 0.5, 0.4]);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[0.1, 0.2]), vec![1.0, 2.0]);
        assert_eq!(average_ranks(&[0.3, 0.1, 0.1]), vec![3.0, 1.5, 1.5]);
        assert_eq!(average_ranks(&[f64::INFINITY, f64::INFINITY]), vec![1.5, 1.5]);
        assert!(mean_rank(&[vec![vec![1.0]]]).is_err());
        assert!(mean_rank(&[vec![vec![1.0]], vec![vec![1.0, 2.0]]]).is_err());
    }

    #[test]
    fn sign_test_examples() {
        assert!((sign_test(16, 0, 4).unwrap() - 6196.0 / 1_048_576.0).abs() < 1e-15);
        assert!((sign_test(16, 0, 4).unwrap() - 0.005909).abs() < 1e-6);
        let c20_10 = 184_756.0;
        assert!((sign_test(10, 0, 10).unwrap() - (0.5 + c20_10 / 2f64.powi(21))).abs() < 1e-15);
        assert_eq!(sign_test(1, 0, 0).unwrap(), 0.5);
        assert_eq!(sign_test(0, 3, 5).unwrap(), 1.0);
        assert!(sign_test(0, 4, 0).is_err());
    }

    #[test]
    fn sign_test_equals_enumeration() {
        for n in 1..=12u32 {
            for w in 0..=n {
                let count = (0u32..1 << n).filter(|s| s.count_ones() >= w).count();
                let brute = count as f64 / (1u64 << n) as f64;
                assert_eq!(sign_test(w as u64, 0, (n - w) as u64).unwrap(), brute, "n={n} w={w}");
            }
        }
    }

    #[test]
    fn sign_test_large_n_is_continuous_with_exact() {
        // 121 uses the log-space path; compare with symmetry p(w) + p(n-w+1) = 1.
        let n = 121;
        for w in [40u64, 61, 80] {
            let a = sign_test(w, 0, n - w).unwrap();
            let b = sign_test(n - w + 1, 0, w - 1).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b}");
        }
    }

    #[test]
    fn ecdf_examples() {
        let e = ecdf(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0], (0.0, 1.0 / 3.0));
        assert!((e[1].0 - 0.5).abs() < 1e-12 && (e[1].1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(e[2], (1.0, 1.0));
        assert!(ecdf(&[0.4, 0.4]).is_err());
        assert_eq!(ecdf(&[1.0, 1.0, 2.0]).unwrap(), vec![(0.0, 2.0 / 3.0), (1.0, 1.0)]);
    }

    #[test]
    fn grid_is_log_spaced() {
        let g = time_grid(1.0, 1000.0, 4);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[3], 1000.0);
        assert!((g[1] - 10.0).abs() < 1e-9 && (g[2] - 100.0).abs() < 1e-9);
        assert_eq!(time_grid(5.0, 5.0, 512), vec![5.0]);
    }

    proptest! {
        #[test]
        fn mean_ranks_conserve_rank_sum(
            k in 2usize..5,
            groups in 1usize..4,
            raw in proptest::collection::vec(0u8..4, 60),
        ) {
            let len = 5;
            let curves: Vec<Vec<Vec<f64>>> = (0..k)
                .map(|o| (0..groups)
                    .map(|g| (0..len).map(|t| raw[(o * 15 + g * 5 + t) % raw.len()] as f64 / 4.0).collect())
                    .collect())
                .collect();
            let m = mean_rank(&curves).unwrap();
            for t in 0..len {
                let mean: f64 = m.iter().map(|row| row[t]).sum::<f64>() / k as f64;
                prop_assert!((mean - (k as f64 + 1.0) / 2.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ecdf_is_affine_invariant(
            v in proptest::collection::vec(-10.0f64..10.0, 2..30),
            a in 0.1f64..100.0,
            b in -50.0f64..50.0,
        ) {
            prop_assume!(v.iter().any(|x| *x != v[0]));
            let e1 = ecdf(&v).unwrap();
            let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let e2 = ecdf(&w).unwrap();
            let step = |e: &[(f64, f64)], x: f64| e.iter().take_while(|p| p.0 <= x + 1e-9).last().map_or(0.0, |p| p.1);
            for &(x, f) in &e1 {
                prop_assert!((step(&e2, x) - f).abs() < 1e-12);
            }
            prop_assert_eq!(e1.last().unwrap().1, 1.0);
            prop_assert!(e1.windows(2).all(|p| p[0].0 < p[1].0 && p[0].1 < p[1].1));
        }

        #[test]
        fn best_seen_is_monotone(raw in proptest::collection::vec((0.0f64..100.0, 1u32..4, 0.0f64..1.0), 0..20)) {
            let ts: Vec<Trial> = raw.iter().map(|&(t, r, l)| trial(t, r, l)).collect();
            let grid = time_grid(0.5, 100.0, 64);
            let c = best_seen(&ts, &grid);
            prop_assert!(c.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
