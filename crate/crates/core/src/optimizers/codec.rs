//! Maps search-space points to and from the unit cube that the optimizers
//! work in.

use rand::Rng as _;

use crate::rng::Rng;
use crate::space::{Dimension, HyperConfig, Kind, SearchSpace};

#[derive(Debug, Clone)]
pub struct Codec {
    dims: Vec<Dimension>,
    /// Decode onto grid points only (tabular benchmarks).
    on_grid: bool,
}

fn bucket(u: f64, k: usize) -> usize {
    ((u.clamp(0.0, 1.0) * k as f64) as usize).min(k - 1)
}

impl Codec {
    pub fn new(space: &SearchSpace, on_grid: bool) -> Self {
        Codec {
            dims: space.dimensions.clone(),
            on_grid,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn on_grid(&self) -> bool {
        self.on_grid
    }

    /// Number of categories when dimension `i` is categorical.
    pub fn categories(&self, i: usize) -> Option<usize> {
        let d = &self.dims[i];
        (d.kind() == Kind::Categorical).then(|| d.values().len())
    }

    pub fn random(&self, r: &mut Rng) -> Vec<f64> {
        (0..self.dims.len()).map(|_| r.random::<f64>()).collect()
    }

    fn decode_dim(&self, d: &Dimension, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        if self.on_grid {
            let g = d.grid();
            return g[bucket(u, g.len())];
        }
        match d.kind() {
            Kind::Categorical => d.values()[bucket(u, d.values().len())],
            Kind::Continuous => {
                if d.is_log() {
                    (d.lo().ln() + u * (d.hi().ln() - d.lo().ln())).exp().clamp(d.lo(), d.hi())
                } else {
                    d.lo() + u * (d.hi() - d.lo())
                }
            }
            Kind::Integer => {
                let (lo, hi) = (d.lo().ceil(), d.hi().floor());
                let v = if d.is_log() {
                    (lo.ln() + u * (hi.ln() - lo.ln())).exp().round()
                } else {
                    (lo + u * (hi - lo + 1.0)).floor()
                };
                v.clamp(lo, hi)
            }
        }
    }

    fn encode_dim(&self, d: &Dimension, v: f64) -> f64 {
        let center = |i: usize, k: usize| (i as f64 + 0.5) / k as f64;
        if self.on_grid {
            let g = d.grid();
            let i = d.grid_index(v).unwrap_or_else(|| {
                let n = d.nearest(v);
                g.iter().position(|&x| x == n).unwrap_or(0)
            });
            return center(i, g.len());
        }
        match d.kind() {
            Kind::Categorical => {
                let vals = d.values();
                let i = vals.iter().position(|&x| x == v).unwrap_or(0);
                center(i, vals.len())
            }
            Kind::Continuous => {
                let u = if d.is_log() {
                    (v.ln() - d.lo().ln()) / (d.hi().ln() - d.lo().ln())
                } else if d.hi() > d.lo() {
                    (v - d.lo()) / (d.hi() - d.lo())
                } else {
                    0.5
                };
                u.clamp(0.0, 1.0)
            }
            Kind::Integer => {
                let (lo, hi) = (d.lo().ceil(), d.hi().floor());
                let u = if d.is_log() {
                    if hi > lo {
                        (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
                    } else {
                        0.5
                    }
                } else {
                    (v - lo + 0.5) / (hi - lo + 1.0)
                };
                u.clamp(0.0, 1.0)
            }
        }
    }

    pub fn decode(&self, u: &[f64]) -> HyperConfig {
        HyperConfig::new(
            self.dims
                .iter()
                .zip(u)
                .map(|(d, &x)| self.decode_dim(d, x))
                .collect(),
        )
    }

    pub fn encode(&self, cfg: &HyperConfig) -> Vec<f64> {
        self.dims
            .iter()
            .zip(&cfg.values)
            .map(|(d, &v)| self.encode_dim(d, v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::space::{builtin_space, Algorithm, Family};
    use proptest::prelude::*;

    #[test]
    fn grid_decoding_is_uniform_over_grid_points() {
        let space = builtin_space(Family::Lr, Algorithm::FedAvg);
        let codec = Codec::new(&space, true);
        let mut r = rng::rng(0);
        let bs = &space.dimensions[0];
        let k = bs.grid().len();
        let mut counts = vec![0usize; k];
        let draws = 10_000;
        for _ in 0..draws {
            let cfg = codec.decode(&codec.random(&mut r));
            space.grid_indices(&cfg).unwrap();
            counts[bs.grid_index(cfg.values[0]).unwrap()] += 1;
        }
        let e = draws as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99.9% quantile of chi-square with 6 degrees of freedom.
        assert!(chi2 < 22.46, "chi2 {chi2}");
    }

    proptest! {
        #[test]
        fn decoded_points_are_valid(u in proptest::collection::vec(0.0f64..=1.0, 8), on_grid: bool) {
            let space = builtin_space(Family::Mlp, Algorithm::FedOpt);
            let codec = Codec::new(&space, on_grid);
            let cfg = codec.decode(&u);
            prop_assert!(space.validate(&cfg).is_ok());
            let again = codec.decode(&codec.encode(&cfg));
            for (a, b) in again.values.iter().zip(&cfg.values) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{} vs {}", a, b);
            }
        }
    }
}
