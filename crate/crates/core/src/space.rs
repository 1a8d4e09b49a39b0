//! Hyperparameter search spaces, configurations, fidelity vectors and grid
//! discretization.
//!
//! A [`SearchSpace`] is an ordered list of [`Dimension`]s. The order is
//! significant: it fixes lookup-table column order and the lexicographic
//! enumeration order of [`grid`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when matching a value against grid points.
const GRID_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Continuous,
    Integer,
    Categorical,
}

/// Which FL subroutine a dimension configures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    #[default]
    Client,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lr,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedOpt,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(Family::Lr),
            "mlp" => Ok(Family::Mlp),
            other => Err(Error::invalid(format!(
                "unknown model family '{other}' (expected lr or mlp)"
            ))),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedopt" => Ok(Algorithm::FedOpt),
            other => Err(Error::invalid(format!(
                "unknown FL algorithm '{other}' (expected fedavg or fedopt)"
            ))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Lr => "lr",
            Family::Mlp => "mlp",
        })
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedOpt => "fedopt",
        })
    }
}

/// Serialized form of a [`Dimension`]; keys match the config file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimensionSpec {
    name: String,
    kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    values: Vec<f64>,
    #[serde(default)]
    log: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bins: Option<usize>,
    #[serde(default)]
    side: Side,
}

/// One hyperparameter axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DimensionSpec", into = "DimensionSpec")]
pub struct Dimension {
    name: String,
    kind: Kind,
    lo: f64,
    hi: f64,
    values: Vec<f64>,
    log: bool,
    bins: usize,
    side: Side,
    grid: Vec<f64>,
}

impl TryFrom<DimensionSpec> for Dimension {
    type Error = Error;

    fn try_from(s: DimensionSpec) -> Result<Self> {
        match s.kind {
            Kind::Categorical => {
                let mut d = Dimension::categorical(&s.name, s.values)?;
                d.side = s.side;
                Ok(d)
            }
            kind => {
                let lo = s
                    .lo
                    .ok_or_else(|| Error::invalid(format!("dimension '{}': missing lo", s.name)))?;
                let hi = s
                    .hi
                    .ok_or_else(|| Error::invalid(format!("dimension '{}': missing hi", s.name)))?;
                let bins = s.bins.ok_or_else(|| {
                    Error::invalid(format!("dimension '{}': missing bins", s.name))
                })?;
                Dimension::ranged(&s.name, kind, lo, hi, s.log, bins, s.side)
            }
        }
    }
}

impl From<Dimension> for DimensionSpec {
    fn from(d: Dimension) -> Self {
        let ranged = d.kind != Kind::Categorical;
        DimensionSpec {
            name: d.name,
            kind: d.kind,
            lo: ranged.then_some(d.lo),
            hi: ranged.then_some(d.hi),
            values: if ranged { Vec::new() } else { d.values },
            log: d.log,
            bins: ranged.then_some(d.bins),
            side: d.side,
        }
    }
}

impl Dimension {
    pub fn ranged(
        name: &str,
        kind: Kind,
        lo: f64,
        hi: f64,
        log: bool,
        bins: usize,
        side: Side,
    ) -> Result<Self> {
        if kind == Kind::Categorical {
            return Err(Error::invalid(format!(
                "dimension '{name}': categorical dimensions take an explicit value list"
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!(
                "dimension '{name}': need lo < hi, got [{lo}, {hi}]"
            )));
        }
        if log && lo <= 0.0 {
            return Err(Error::invalid(format!(
                "dimension '{name}': log scale requires lo > 0"
            )));
        }
        if bins < 2 {
            return Err(Error::invalid(format!(
                "dimension '{name}': ranged dimensions need at least 2 grid bins"
            )));
        }
        let mut d = Dimension {
            name: name.to_string(),
            kind,
            lo,
            hi,
            values: Vec::new(),
            log,
            bins,
            side,
            grid: Vec::new(),
        };
        d.grid = d.compute_grid();
        Ok(d)
    }

    pub fn continuous(name: &str, lo: f64, hi: f64, log: bool, bins: usize) -> Result<Self> {
        Self::ranged(name, Kind::Continuous, lo, hi, log, bins, Side::Client)
    }

    pub fn integer(name: &str, lo: f64, hi: f64, log: bool, bins: usize) -> Result<Self> {
        Self::ranged(name, Kind::Integer, lo, hi, log, bins, Side::Client)
    }

    pub fn categorical(name: &str, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid(format!(
                "dimension '{name}': categorical value list is empty"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "dimension '{name}': categorical values must be finite"
            )));
        }
        for (i, a) in values.iter().enumerate() {
            if values[..i].contains(a) {
                return Err(Error::invalid(format!(
                    "dimension '{name}': duplicate categorical value {a}"
                )));
            }
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Dimension {
            name: name.to_string(),
            kind: Kind::Categorical,
            lo,
            hi,
            bins: values.len(),
            grid: values.clone(),
            values,
            log: false,
            side: Side::Client,
        })
    }

    pub fn with_side(mut self, side: Side) -> Self {
        self.side = side;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn is_log(&self) -> bool {
        self.log
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Categorical value list (empty for ranged dimensions).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Tabular grid of this dimension, in ascending order for ranged kinds
    /// and list order for categorical ones.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn compute_grid(&self) -> Vec<f64> {
        let n = self.bins;
        let mut out: Vec<f64> = Vec::with_capacity(n);
        for k in 0..n {
            let t = k as f64 / (n - 1) as f64;
            let raw = if k == 0 {
                self.lo
            } else if k == n - 1 {
                self.hi
            } else if self.log {
                let (a, b) = (self.lo.log10(), self.hi.log10());
                10f64.powf(a + t * (b - a))
            } else {
                self.lo + t * (self.hi - self.lo)
            };
            let v = match self.kind {
                Kind::Integer => round_half_up(raw),
                _ => tidy(raw),
            };
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }

    /// Whether `v` is a legal value of this dimension.
    pub fn contains(&self, v: f64) -> bool {
        if !v.is_finite() {
            return false;
        }
        match self.kind {
            Kind::Categorical => self.values.iter().any(|&c| approx_eq(c, v)),
            Kind::Integer => {
                v == v.round() && v >= self.lo.ceil() - 0.0 && v <= self.hi.floor()
            }
            Kind::Continuous => {
                let slack = GRID_MATCH_TOL * (self.hi - self.lo).abs().max(1.0);
                v >= self.lo - slack && v <= self.hi + slack
            }
        }
    }

    /// Index of `v` in the grid, if `v` is a grid point.
    pub fn grid_index(&self, v: f64) -> Option<usize> {
        self.grid.iter().position(|&g| approx_eq(g, v))
    }

    fn distance(&self, a: f64, b: f64) -> f64 {
        if self.log {
            (a.log10() - b.log10()).abs()
        } else {
            (a - b).abs()
        }
    }

    /// Nearest grid value; log-domain distance for log dimensions, ties go to
    /// the smaller value.
    pub fn nearest(&self, v: f64) -> f64 {
        let mut best = self.grid[0];
        let mut best_d = self.distance(v, best);
        for &g in &self.grid[1..] {
            let d = self.distance(v, g);
            let tie = (d - best_d).abs() <= 1e-12 * best_d.max(1e-300);
            if (d < best_d && !tie) || (tie && g < best) {
                best = g;
                best_d = d;
            }
        }
        best
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Rounds to 12 significant digits so that grid points such as 1e-4 are the
/// nearest double to their decimal form.
fn tidy(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn approx_eq(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= GRID_MATCH_TOL * a.abs().max(b.abs())
}

/// Fidelity axes: the number of rounds and the client sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySpace {
    pub min_rounds: u32,
    pub max_rounds: u32,
    pub sample_rates: Vec<f64>,
}

impl FidelitySpace {
    pub fn new(min_rounds: u32, max_rounds: u32, sample_rates: Vec<f64>) -> Result<Self> {
        if min_rounds > max_rounds {
            return Err(Error::invalid("fidelity: min_rounds exceeds max_rounds"));
        }
        if sample_rates.is_empty()
            || sample_rates
                .iter()
                .any(|&s| !(s.is_finite() && s > 0.0 && s <= 1.0))
        {
            return Err(Error::invalid("fidelity: sample rates must lie in (0, 1]"));
        }
        Ok(FidelitySpace {
            min_rounds,
            max_rounds,
            sample_rates,
        })
    }

    pub fn contains(&self, b: &FidelityVector) -> bool {
        b.rounds >= self.min_rounds
            && b.rounds <= self.max_rounds
            && self.sample_rates.iter().any(|&s| approx_eq(s, b.sample_rate))
    }

    pub fn max_sample_rate(&self) -> f64 {
        self.sample_rates.iter().cloned().fold(0.0, f64::max)
    }
}

/// Cheapness knobs of an evaluation: `#round` and `sample_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityVector {
    pub rounds: u32,
    pub sample_rate: f64,
}

impl FidelityVector {
    pub fn new(rounds: u32, sample_rate: f64) -> Self {
        FidelityVector {
            rounds,
            sample_rate,
        }
    }

    /// Number of clients sampled per round out of `n_clients`.
    pub fn sampled_clients(&self, n_clients: usize) -> usize {
        let raw = self.sample_rate * n_clients as f64;
        // 0.6 * 5 is 3.0000000000000004 in binary floating point.
        let n = (raw - 1e-9).ceil().max(1.0) as usize;
        n.min(n_clients.max(1))
    }
}

/// A point of the search space, one value per dimension in space order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub values: Vec<f64>,
}

impl HyperConfig {
    pub fn new(values: Vec<f64>) -> Self {
        HyperConfig { values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
    pub fidelity: FidelitySpace,
}

/// File layout of a serialized search space.
#[derive(Serialize, Deserialize)]
struct SpaceFile {
    dimensions: Vec<Dimension>,
    fidelity: FidelitySpace,
}

impl SearchSpace {
    pub fn new(dimensions: Vec<Dimension>, fidelity: FidelitySpace) -> Result<Self> {
        for (i, d) in dimensions.iter().enumerate() {
            if dimensions[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::invalid(format!(
                    "duplicate dimension name '{}'",
                    d.name
                )));
            }
        }
        Ok(SearchSpace {
            dimensions,
            fidelity,
        })
    }

    pub fn len(&self) -> usize {
        self.dimensions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dimensions.iter().position(|d| d.name == name)
    }

    pub fn get(&self, cfg: &HyperConfig, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| cfg.values[i])
    }

    pub fn names(&self) -> Vec<&str> {
        self.dimensions.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn client_dims(&self) -> impl Iterator<Item = (usize, &Dimension)> {
        self.dimensions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.side == Side::Client)
    }

    pub fn has_server_dims(&self) -> bool {
        self.dimensions.iter().any(|d| d.side == Side::Server)
    }

    /// Server-side dimensions must be present exactly for FedOPT.
    pub fn check_algorithm(&self, algorithm: Algorithm) -> Result<()> {
        match (algorithm, self.has_server_dims()) {
            (Algorithm::FedOpt, false) => Err(Error::invalid(
                "FedOPT search spaces need server-side dimensions",
            )),
            (Algorithm::FedAvg, true) => Err(Error::invalid(
                "FedAvg search spaces cannot contain server-side dimensions",
            )),
            _ => Ok(()),
        }
    }

    /// Copy of this space restricted to client-side dimensions.
    pub fn without_server_dims(&self) -> SearchSpace {
        SearchSpace {
            dimensions: self
                .dimensions
                .iter()
                .filter(|d| d.side == Side::Client)
                .cloned()
                .collect(),
            fidelity: self.fidelity.clone(),
        }
    }

    pub fn validate(&self, cfg: &HyperConfig) -> Result<()> {
        if cfg.values.len() != self.dimensions.len() {
            return Err(Error::invalid(format!(
                "configuration has {} values, space has {} dimensions",
                cfg.values.len(),
                self.dimensions.len()
            )));
        }
        for (d, &v) in self.dimensions.iter().zip(&cfg.values) {
            if !d.contains(v) {
                return Err(Error::invalid(format!(
                    "value {v} is outside dimension '{}'",
                    d.name
                )));
            }
        }
        Ok(())
    }

    /// Per-dimension grid indices of `cfg`, or a grid-miss error naming the
    /// first off-grid dimension.
    pub fn grid_indices(&self, cfg: &HyperConfig) -> Result<Vec<usize>> {
        self.dimensions
            .iter()
            .zip(&cfg.values)
            .map(|(d, &v)| {
                d.grid_index(v).ok_or_else(|| {
                    Error::GridMiss(format!("{}={v} is not a grid value", d.name))
                })
            })
            .collect()
    }

    /// Number of grid points (product of per-dimension grid sizes).
    pub fn grid_size(&self) -> usize {
        self.dimensions.iter().map(|d| d.grid.len()).product()
    }

    /// Position of a grid point in the lexicographic enumeration of [`grid`].
    pub fn grid_rank(&self, indices: &[usize]) -> usize {
        self.dimensions
            .iter()
            .zip(indices)
            .fold(0, |acc, (d, &i)| acc * d.grid.len() + i)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&SpaceFile {
            dimensions: self.dimensions.clone(),
            fidelity: self.fidelity.clone(),
        })
        .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: SpaceFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        SearchSpace::new(f.dimensions, f.fidelity)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// The built-in LR and MLP search spaces for FedAvg and FedOPT.
pub fn builtin_space(family: Family, algorithm: Algorithm) -> SearchSpace {
    let mut dims = vec![
        Dimension::integer("batch_size", 4.0, 256.0, true, 7),
        Dimension::continuous("weight_decay", 0.0, 0.001, false, 4),
        Dimension::integer("step_size", 1.0, 4.0, false, 4),
        Dimension::continuous("learning_rate", 1e-5, 1.0, true, 6),
    ];
    if family == Family::Mlp {
        dims.push(Dimension::integer("depth", 1.0, 3.0, false, 3));
        dims.push(Dimension::integer("width", 16.0, 1024.0, true, 7));
    }
    if algorithm == Algorithm::FedOpt {
        dims.push(
            Dimension::continuous("server_momentum", 0.0, 0.9, false, 2)
                .map(|d| d.with_side(Side::Server)),
        );
        dims.push(
            Dimension::continuous("server_learning_rate", 0.1, 1.0, false, 3)
                .map(|d| d.with_side(Side::Server)),
        );
    }
    let dims = dims
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .expect("built-in dimensions are valid");
    let sample_rates = Dimension::continuous("sample_rate", 0.2, 1.0, false, 5)
        .expect("valid")
        .grid()
        .to_vec();
    let fidelity = FidelitySpace::new(1, 500, sample_rates).expect("valid");
    SearchSpace::new(dims, fidelity).expect("built-in names are unique")
}

/// Builds a built-in space from textual family and algorithm names.
pub fn builtin_space_named(family: &str, algorithm: &str) -> Result<SearchSpace> {
    Ok(builtin_space(family.parse()?, algorithm.parse()?))
}

/// Cartesian product of per-dimension grids in lexicographic dimension order
/// (the first dimension varies slowest).
pub fn grid(space: &SearchSpace) -> Vec<HyperConfig> {
    let mut out = vec![Vec::with_capacity(space.len())];
    for d in &space.dimensions {
        let mut next = Vec::with_capacity(out.len() * d.grid.len());
        for prefix in &out {
            for &g in &d.grid {
                let mut p = prefix.clone();
                p.push(g);
                next.push(p);
            }
        }
        out = next;
    }
    out.into_iter().map(HyperConfig::new).collect()
}

/// Snaps each value of `cfg` to its dimension's nearest grid value.
pub fn nearest_grid(space: &SearchSpace, cfg: &HyperConfig) -> HyperConfig {
    HyperConfig::new(
        space
            .dimensions
            .iter()
            .zip(&cfg.values)
            .map(|(d, &v)| d.nearest(v))
            .collect(),
    )
}
