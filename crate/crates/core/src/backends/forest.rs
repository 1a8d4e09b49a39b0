//! Regression forests of CART trees with variance-reduction splits.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::space::{FidelityVector, HyperConfig, Kind, SearchSpace};

/// Mean that is exact when all values are equal.
fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut first = None;
    let mut acc = 0.0;
    let mut n = 0usize;
    for v in values {
        let f = *first.get_or_insert(v);
        acc += v - f;
        n += 1;
    }
    match first {
        Some(f) => f + acc / n as f64,
        None => 0.0,
    }
}

/// How one search-space dimension maps onto feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Linear,
    Log10,
    OneHot(Vec<f64>),
}

/// Feature map from `(config, fidelity)` to a dense row: one column per
/// numeric dimension (log dims in log10), one-hot columns for categorical
/// dims, then `ln(1 + rounds)` and `sample_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub columns: Vec<Column>,
}

impl Encoding {
    pub fn for_space(space: &SearchSpace) -> Self {
        Encoding {
            columns: space
                .dimensions
                .iter()
                .map(|d| match d.kind() {
                    Kind::Categorical => Column::OneHot(d.values().to_vec()),
                    _ if d.is_log() => Column::Log10,
                    _ => Column::Linear,
                })
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                Column::OneHot(v) => v.len(),
                _ => 1,
            })
            .sum::<usize>()
            + 2
    }

    pub fn encode(&self, cfg: &HyperConfig, b: &FidelityVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        for (c, &v) in self.columns.iter().zip(&cfg.values) {
            match c {
                Column::Linear => out.push(v),
                Column::Log10 => out.push(v.max(f64::MIN_POSITIVE).log10()),
                Column::OneHot(values) => {
                    out.extend(values.iter().map(|&x| if x == v { 1.0 } else { 0.0 }))
                }
            }
        }
        out.push((1.0 + b.rounds as f64).ln());
        out.push(b.sample_rate);
        out
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_u32::<LE>(self.columns.len() as u32)?;
        for c in &self.columns {
            match c {
                Column::Linear => w.write_u8(0)?,
                Column::Log10 => w.write_u8(1)?,
                Column::OneHot(values) => {
                    w.write_u8(2)?;
                    w.write_u32::<LE>(values.len() as u32)?;
                    for &v in values {
                        w.write_f64::<LE>(v)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let n = r.read_u32::<LE>().map_err(bin_err)?;
        let mut columns = Vec::with_capacity(n as usize);
        for _ in 0..n {
            columns.push(match r.read_u8().map_err(bin_err)? {
                0 => Column::Linear,
                1 => Column::Log10,
                2 => {
                    let k = r.read_u32::<LE>().map_err(bin_err)?;
                    let values = (0..k)
                        .map(|_| r.read_f64::<LE>())
                        .collect::<std::io::Result<Vec<_>>>()
                        .map_err(bin_err)?;
                    Column::OneHot(values)
                }
                t => return Err(Error::Parse(format!("unknown column tag {t}"))),
            });
        }
        Ok(Encoding { columns })
    }
}

pub(crate) fn bin_err(e: std::io::Error) -> Error {
    Error::Parse(format!("surrogate file: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    Leaf(f64),
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

/// Dense training matrix, row-major.
pub struct Samples<'a> {
    pub x: &'a [f64],
    pub width: usize,
    pub y: &'a [f64],
}

impl Samples<'_> {
    fn at(&self, row: usize, col: usize) -> f64 {
        self.x[row * self.width + col]
    }
}

struct Builder<'a, 'b> {
    data: &'b Samples<'a>,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
    pairs: Vec<(f64, f64)>,
}

impl Builder<'_, '_> {
    fn leaf(&mut self, rows: &[usize]) -> u32 {
        let v = stable_mean(rows.iter().map(|&r| self.data.y[r]));
        self.nodes.push(TreeNode::Leaf(v));
        (self.nodes.len() - 1) as u32
    }

    /// Best `(gain, feature, threshold)` over all features.
    fn best_split(&mut self, rows: &[usize]) -> Option<(f64, usize, f64)> {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&r| self.data.y[r]).sum();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..self.data.width {
            self.pairs.clear();
            self.pairs
                .extend(rows.iter().map(|&r| (self.data.at(r, f), self.data.y[r])));
            self.pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if self.pairs[0].0 == self.pairs[n - 1].0 {
                continue;
            }
            let mut left_sum = 0.0;
            for i in 0..n - 1 {
                left_sum += self.pairs[i].1;
                let nl = i + 1;
                if self.pairs[i].0 == self.pairs[i + 1].0 || nl < self.min_leaf || n - nl < self.min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                // Reduction of squared error up to a constant.
                let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / (n - nl) as f64
                    - total * total / n as f64;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let thr = 0.5 * (self.pairs[i].0 + self.pairs[i + 1].0);
                    best = Some((gain, f, thr));
                }
            }
        }
        best.filter(|&(g, _, _)| g > 1e-12 * (1.0 + total.abs()))
    }

    fn build(&mut self, rows: &mut [usize], depth: usize) -> u32 {
        let first = self.data.y[rows[0]];
        let pure = rows.iter().all(|&r| self.data.y[r] == first);
        if depth >= self.max_depth || rows.len() < 2 * self.min_leaf || pure {
            return self.leaf(rows);
        }
        let Some((_, feature, threshold)) = self.best_split(rows) else {
            return self.leaf(rows);
        };
        let data = self.data;
        rows.sort_by(|&a, &b| {
            (data.at(a, feature) > threshold).cmp(&(data.at(b, feature) > threshold))
        });
        let split = rows.partition_point(|&r| data.at(r, feature) <= threshold);
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(0.0));
        let (l, r) = rows.split_at_mut(split);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = TreeNode::Split {
            feature: feature as u32,
            threshold,
            left,
            right,
        };
        id as u32
    }
}

impl Tree {
    pub fn fit(data: &Samples<'_>, rows: &mut [usize], max_depth: usize, min_leaf: usize) -> Tree {
        let mut b = Builder {
            data,
            max_depth,
            min_leaf: min_leaf.max(1),
            nodes: Vec::new(),
            pairs: Vec::with_capacity(rows.len()),
        };
        b.build(rows, 0);
        Tree { nodes: b.nodes }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= threshold { left } else { right } as usize;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub max_depth: usize,
    pub trees: Vec<Tree>,
}

impl Forest {
    /// Fits `n_trees` trees, each on a bootstrap sample of all rows.
    pub fn fit(data: &Samples<'_>, n_trees: usize, max_depth: usize, min_leaf: usize, seed: u64) -> Forest {
        let n = data.y.len();
        let trees = (0..n_trees)
            .map(|t| {
                let mut r = rng::rng(rng::mix(seed, t as u64));
                let mut rows: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
                Tree::fit(data, &mut rows, max_depth, min_leaf)
            })
            .collect();
        Forest { max_depth, trees }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        stable_mean(self.trees.iter().map(|t| t.predict(x)))
    }

    pub(crate) fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_u32::<LE>(self.max_depth as u32)?;
        w.write_u32::<LE>(self.trees.len() as u32)?;
        for t in &self.trees {
            w.write_u32::<LE>(t.nodes.len() as u32)?;
            for node in &t.nodes {
                match *node {
                    TreeNode::Leaf(v) => {
                        w.write_u8(0)?;
                        w.write_f64::<LE>(v)?;
                    }
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.write_u8(1)?;
                        w.write_u32::<LE>(feature)?;
                        w.write_f64::<LE>(threshold)?;
                        w.write_u32::<LE>(left)?;
                        w.write_u32::<LE>(right)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn read_from(r: &mut impl Read, width: usize) -> Result<Forest> {
        let max_depth = r.read_u32::<LE>().map_err(bin_err)? as usize;
        let n_trees = r.read_u32::<LE>().map_err(bin_err)?;
        let mut trees = Vec::with_capacity(n_trees as usize);
        for _ in 0..n_trees {
            let n_nodes = r.read_u32::<LE>().map_err(bin_err)?;
            let mut nodes = Vec::with_capacity(n_nodes as usize);
            for _ in 0..n_nodes {
                nodes.push(match r.read_u8().map_err(bin_err)? {
                    0 => TreeNode::Leaf(r.read_f64::<LE>().map_err(bin_err)?),
                    1 => TreeNode::Split {
                        feature: r.read_u32::<LE>().map_err(bin_err)?,
                        threshold: r.read_f64::<LE>().map_err(bin_err)?,
                        left: r.read_u32::<LE>().map_err(bin_err)?,
                        right: r.read_u32::<LE>().map_err(bin_err)?,
                    },
                    t => return Err(Error::Parse(format!("unknown node tag {t}"))),
                });
            }
            let valid = nodes.iter().enumerate().all(|(i, n)| match *n {
                TreeNode::Leaf(_) => true,
                TreeNode::Split { feature, left, right, .. } => {
                    (feature as usize) < width
                        && (left as usize) > i
                        && (right as usize) > i
                        && (left as usize) < nodes.len()
                        && (right as usize) < nodes.len()
                }
            });
            if nodes.is_empty() || !valid {
                return Err(Error::Parse("surrogate file: malformed tree".into()));
            }
            trees.push(Tree { nodes });
        }
        Ok(Forest { max_depth, trees })
    }
}

pub(crate) fn write_encoding(e: &Encoding, w: &mut impl Write) -> std::io::Result<()> {
    e.write_to(w)
}

pub(crate) fn read_encoding(r: &mut impl Read) -> Result<Encoding> {
    Encoding::read_from(r)
}
