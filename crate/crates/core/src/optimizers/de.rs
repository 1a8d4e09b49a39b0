//! Differential evolution operators on the unit cube.

use rand::seq::index;
use rand::Rng as _;

use crate::rng::Rng;

/// Latin hypercube sample of `n` points in `[0, 1]^d`.
pub fn latin_hypercube(n: usize, d: usize, r: &mut Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(strata.as_mut_slice(), r);
        for (i, s) in strata.into_iter().enumerate() {
            pts[i][j] = (s as f64 + r.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// `rand/1` mutant `a + F (b - c)` clipped to the cube. Parents are drawn
/// from `pool` without replacement, avoiding index `exclude` when possible.
pub fn mutant(pool: &[&[f64]], exclude: Option<usize>, f: f64, r: &mut Rng) -> Vec<f64> {
    let candidates: Vec<usize> = (0..pool.len())
        .filter(|&i| Some(i) != exclude || pool.len() <= 3)
        .collect();
    let picks: Vec<usize> = if candidates.len() >= 3 {
        index::sample(r, candidates.len(), 3)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    } else {
        (0..3).map(|_| r.random_range(0..pool.len())).collect()
    };
    let (a, b, c) = (pool[picks[0]], pool[picks[1]], pool[picks[2]]);
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((x, y), z)| (x + f * (y - z)).clamp(0.0, 1.0))
        .collect()
}

/// Binomial crossover of `mutant` into `target`; one coordinate always comes
/// from the mutant.
pub fn crossover(target: &[f64], mutant: &[f64], cr: f64, r: &mut Rng) -> Vec<f64> {
    let forced = r.random_range(0..target.len().max(1));
    target
        .iter()
        .zip(mutant)
        .enumerate()
        .map(|(j, (&t, &m))| if j == forced || r.random::<f64>() < cr { m } else { t })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn lhs_has_one_point_per_stratum() {
        let pts = latin_hypercube(20, 3, &mut rng::rng(0));
        for j in 0..3 {
            let mut s: Vec<usize> = pts.iter().map(|p| (p[j] * 20.0) as usize).collect();
            s.sort_unstable();
            assert_eq!(s, (0..20).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mutants_stay_in_cube_and_crossover_mixes() {
        let mut r = rng::rng(1);
        let pop = latin_hypercube(5, 4, &mut r);
        let pool: Vec<&[f64]> = pop.iter().map(|p| p.as_slice()).collect();
        for _ in 0..100 {
            let m = mutant(&pool, Some(0), 0.5, &mut r);
            assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
            let t = crossover(&pop[0], &m, 0.5, &mut r);
            assert!(t.iter().zip(&m).any(|(a, b)| a == b));
        }
    }
}
