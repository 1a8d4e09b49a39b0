//! Surrogate benchmarks: forests fitted on a lookup table, one per metric.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::forest::{bin_err, read_encoding, write_encoding, Encoding, Forest, Samples};
use super::table::{LookupTable, TableMeta};
use super::Metrics;
use crate::error::{Error, Result};
use crate::rng;
use crate::space::{FidelityVector, HyperConfig};

pub const MAGIC: &[u8; 8] = b"FHPOSRG1";
pub const FORMAT_VERSION: u32 = 1;
pub const FOREST_SIZES: [usize; 2] = [10, 20];
pub const FOREST_DEPTHS: [usize; 3] = [10, 15, 20];
const FOLDS: usize = 10;
const MIN_ROWS: usize = 20;
const MIN_LEAF: usize = 1;
const VALID_LOSS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub meta: TableMeta,
    pub encoding: Encoding,
    pub n_trees: usize,
    pub max_depth: usize,
    pub cv_mae: f64,
    /// One forest per metric, in storage order.
    pub forests: Vec<Forest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateFit {
    pub surrogate: Surrogate,
    pub cv_mae: f64,
    /// `(n_trees, max_depth, mae)` for every candidate pair.
    pub candidates: Vec<(usize, usize, f64)>,
}

fn design(table: &LookupTable, enc: &Encoding) -> (Vec<f64>, Vec<[f64; 9]>) {
    let mut x = Vec::with_capacity(table.len() * enc.width());
    let mut y = Vec::with_capacity(table.len());
    for r in &table.rows {
        x.extend(enc.encode(&r.config, &r.fidelity));
        y.push(r.metrics.to_array());
    }
    (x, y)
}

fn subset(x: &[f64], width: usize, y: &[f64], rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        xs.extend_from_slice(&x[r * width..(r + 1) * width]);
    }
    (xs, rows.iter().map(|&r| y[r]).collect())
}

/// Grid-searches forest size and depth by 10-fold cross-validation on the
/// validation loss, then refits every metric on all rows with the best pair.
pub fn fit_surrogate(table: &LookupTable, seed: u64) -> Result<SurrogateFit> {
    if table.len() < MIN_ROWS {
        return Err(Error::TooFewRows {
            needed: MIN_ROWS,
            got: table.len(),
        });
    }
    let enc = Encoding::for_space(&table.meta.space);
    let width = enc.width();
    let (x, ys) = design(table, &enc);
    let target: Vec<f64> = ys.iter().map(|m| m[VALID_LOSS]).collect();
    let n = target.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::mix(seed, 0xC5)));
    let folds: Vec<Vec<usize>> = (0..FOLDS)
        .map(|k| order.iter().copied().skip(k).step_by(FOLDS).collect())
        .collect();

    let pairs: Vec<(usize, usize)> = FOREST_SIZES
        .iter()
        .flat_map(|&t| FOREST_DEPTHS.iter().map(move |&d| (t, d)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|p| (0..FOLDS).map(move |k| (p, k)))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(p, k)| {
            let (n_trees, depth) = pairs[p];
            let train: Vec<usize> = (0..FOLDS)
                .filter(|&j| j != k)
                .flat_map(|j| folds[j].iter().copied())
                .collect();
            let (xt, yt) = subset(&x, width, &target, &train);
            let data = Samples {
                x: &xt,
                width,
                y: &yt,
            };
            let f = Forest::fit(&data, n_trees, depth, MIN_LEAF, rng::mix_all(seed, &[p as u64, k as u64]));
            folds[k]
                .iter()
                .map(|&r| (f.predict(&x[r * width..(r + 1) * width]) - target[r]).abs())
                .sum::<f64>()
        })
        .collect();
    let candidates: Vec<(usize, usize, f64)> = pairs
        .iter()
        .enumerate()
        .map(|(p, &(t, d))| (t, d, errors[p * FOLDS..(p + 1) * FOLDS].iter().sum::<f64>() / n as f64))
        .collect();
    let &(n_trees, max_depth, cv_mae) = candidates
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("six candidates");

    let forests: Vec<Forest> = (0..9)
        .into_par_iter()
        .map(|m| {
            let y: Vec<f64> = ys.iter().map(|v| v[m]).collect();
            let data = Samples { x: &x, width, y: &y };
            Forest::fit(&data, n_trees, max_depth, MIN_LEAF, rng::mix_all(seed, &[0xF0, m as u64]))
        })
        .collect();
    log::info!("surrogate: best n_trees={n_trees} max_depth={max_depth} cv_mae={cv_mae:.6}");
    Ok(SurrogateFit {
        surrogate: Surrogate {
            meta: table.meta.clone(),
            encoding: enc,
            n_trees,
            max_depth,
            cv_mae,
            forests,
        },
        cv_mae,
        candidates,
    })
}

impl Surrogate {
    pub fn predict(&self, cfg: &HyperConfig, b: &FidelityVector) -> Metrics {
        let x = self.encoding.encode(cfg, b);
        let mut out = [0.0; 9];
        for (o, f) in out.iter_mut().zip(&self.forests) {
            *o = f.predict(&x);
        }
        Metrics::from_array(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let meta = self.meta.to_toml()?;
        let mut inner = || -> std::io::Result<()> {
            let mut buf = Vec::new();
            buf.write_all(MAGIC)?;
            buf.write_u32::<LE>(FORMAT_VERSION)?;
            buf.write_u32::<LE>(meta.len() as u32)?;
            buf.write_all(meta.as_bytes())?;
            write_encoding(&self.encoding, &mut buf)?;
            buf.write_u32::<LE>(self.n_trees as u32)?;
            buf.write_u32::<LE>(self.max_depth as u32)?;
            buf.write_f64::<LE>(self.cv_mae)?;
            buf.write_u32::<LE>(self.forests.len() as u32)?;
            for f in &self.forests {
                f.write_to(&mut buf)?;
            }
            w.write_all(&buf)
        };
        inner().map_err(bin_err)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bin_err)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a surrogate file (bad magic)".into()));
        }
        let version = r.read_u32::<LE>().map_err(bin_err)?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported surrogate format version {version}")));
        }
        let len = r.read_u32::<LE>().map_err(bin_err)? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(bin_err)?;
        let text = String::from_utf8(text).map_err(|e| Error::Parse(e.to_string()))?;
        let meta = TableMeta::from_toml(&text)?;
        let encoding = read_encoding(r)?;
        if encoding != Encoding::for_space(&meta.space) {
            return Err(Error::Parse("surrogate encoding does not match its search space".into()));
        }
        let n_trees = r.read_u32::<LE>().map_err(bin_err)? as usize;
        let max_depth = r.read_u32::<LE>().map_err(bin_err)? as usize;
        let cv_mae = r.read_f64::<LE>().map_err(bin_err)?;
        let n_forests = r.read_u32::<LE>().map_err(bin_err)?;
        if n_forests != 9 {
            return Err(Error::Parse(format!("expected 9 forests, found {n_forests}")));
        }
        let forests = (0..n_forests)
            .map(|_| Forest::read_from(r, encoding.width()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Surrogate {
            meta,
            encoding,
            n_trees,
            max_depth,
            cv_mae,
            forests,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::table::{TableRow, TableSpec};
    use crate::space::{grid, Algorithm, Dimension, FidelitySpace, SearchSpace};

    fn synthetic_table(target: impl Fn(&HyperConfig) -> f64) -> LookupTable {
        let space = SearchSpace::new(
            vec![
                Dimension::integer("step_size", 1.0, 4.0, false, 4).unwrap(),
                Dimension::continuous("learning_rate", 1e-3, 1.0, true, 4).unwrap(),
                Dimension::categorical("optim", vec![0.0, 1.0]).unwrap(),
            ],
            FidelitySpace::new(1, 10, vec![1.0]).unwrap(),
        )
        .unwrap();
        let spec = TableSpec::new(vec![5], vec![1.0], 1).unwrap();
        let rows = grid(&space)
            .into_iter()
            .map(|c| {
                let v = target(&c);
                TableRow {
                    fidelity: FidelityVector::new(5, 1.0),
                    metrics: Metrics::from_array([v; 9]),
                    config: c,
                    n_seeds: 1,
                }
            })
            .collect();
        LookupTable {
            meta: TableMeta {
                task: "t".into(),
                algorithm: Algorithm::FedAvg,
                n_clients: 4,
                n_features: 3,
                n_classes: 2,
                spec: spec.clone(),
                space,
            },
            spec,
            rows,
        }
    }

    #[test]
    fn constant_target_has_zero_error() {
        let t = synthetic_table(|_| 0.37);
        let fit = fit_surrogate(&t, 0).unwrap();
        assert_eq!(fit.cv_mae, 0.0);
        let q = HyperConfig::new(vec![2.0, 0.05, 1.0]);
        assert_eq!(fit.surrogate.predict(&q, &FidelityVector::new(7, 0.5)).valid_loss, 0.37);
        assert_eq!(fit.candidates.len(), 6);
    }

    #[test]
    fn step_target_is_learned() {
        let t = synthetic_table(|c| if c.values[0] >= 3.0 { 1.0 } else { 0.0 });
        let fit = fit_surrogate(&t, 1).unwrap();
        assert!(fit.cv_mae <= 0.05, "cv_mae {}", fit.cv_mae);
    }

    #[test]
    fn deterministic_and_roundtrips() {
        let t = synthetic_table(|c| c.values[1].ln() + c.values[0] * 0.1 + c.values[2]);
        let a = fit_surrogate(&t, 3).unwrap();
        assert_eq!(a, fit_surrogate(&t, 3).unwrap());
        let mut buf = Vec::new();
        a.surrogate.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"FHPOSRG1");
        assert_eq!(Surrogate::read_from(&mut buf.as_slice()).unwrap(), a.surrogate);
        buf[0] = b'X';
        assert!(Surrogate::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn too_few_rows() {
        let mut t = synthetic_table(|_| 1.0);
        t.rows.truncate(19);
        assert!(matches!(fit_surrogate(&t, 0), Err(Error::TooFewRows { needed: 20, got: 19 })));
    }
}
