//! Dataset ingestion, synthetic data, non-IID client partitioning and
//! train/valid/test splitting.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, mix};

/// Dense classification dataset, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if n_features == 0 || n_classes == 0 {
            return Err(Error::invalid("dataset needs features and classes"));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} rows of {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset features must be finite"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    /// An empty dataset with the given shape, used for degenerate splits.
    pub fn empty(n_features: usize, n_classes: usize) -> Self {
        Dataset {
            features: Vec::new(),
            n_features,
            labels: Vec::new(),
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels,
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Loads a CSV file with a header row. The label column is factorized to
/// class indices in first-appearance order; every other column must be
/// numeric and is standardized to zero mean and unit variance.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::invalid(format!(
                "{}: no label column named '{label_column}'",
                path.display()
            ))
        })?;
    let n_features = headers.len() - 1;
    if n_features == 0 {
        return Err(Error::invalid(format!(
            "{}: no feature columns",
            path.display()
        )));
    }

    let mut class_of: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut features = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let next = class_of.len();
                labels.push(*class_of.entry(cell.to_string()).or_insert(next));
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Parse(format!(
                        "{}: row {}, column '{}': '{cell}' is not numeric",
                        path.display(),
                        line + 2,
                        &headers[col]
                    ))
                })?;
                features.push(v);
            }
        }
    }
    let n_classes = class_of.len();
    if n_classes < 2 {
        return Err(Error::invalid(format!(
            "{}: label column '{label_column}' has fewer than two classes",
            path.display()
        )));
    }
    if labels.len() < n_classes {
        return Err(Error::invalid("fewer samples than classes"));
    }
    standardize(&mut features, n_features);
    Dataset::new(features, n_features, labels, n_classes)
}

/// Per-column standardization; constant columns become all zeros.
fn standardize(features: &mut [f64], n_features: usize) {
    let n = features.len() / n_features;
    if n == 0 {
        return;
    }
    for c in 0..n_features {
        let mean = (0..n).map(|r| features[r * n_features + c]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|r| (features[r * n_features + c] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = var.sqrt();
        for r in 0..n {
            let v = &mut features[r * n_features + c];
            *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
        }
    }
}

/// Gaussian blobs around class means placed on the unit sphere. Sample `i`
/// belongs to class `i % n_classes`, so class sizes differ by at most one.
pub fn synth_blobs(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(Error::invalid("synth_blobs: counts must be positive"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid("synth_blobs: spread must be positive"));
    }
    if n_samples < n_classes {
        return Err(Error::invalid("synth_blobs: fewer samples than classes"));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut mean_rng = rng::rng(mix(seed, 1));
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..n_features)
                .map(|_| std_normal.sample(&mut mean_rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::rng(mix(seed, 2));
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        for &m in &means[class] {
            features.push(m + noise.sample(&mut rng));
        }
        labels.push(class);
    }
    Dataset::new(features, n_features, labels, n_classes)
}

/// Dirichlet (LDA) label-skew partitioning. For every class a client mixture
/// `p ~ Dir(alpha)` is drawn and that class's samples are assigned to clients
/// by `p`. Empty clients then take one sample from the largest client until
/// every client holds at least one sample. Shards are returned sorted.
pub fn lda_split(data: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::invalid("lda_split: need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("lda_split: alpha must be positive"));
    }
    if n_clients > data.len() {
        return Err(Error::invalid(format!(
            "lda_split: {n_clients} clients but only {} samples",
            data.len()
        )));
    }
    if n_clients == 1 {
        return Ok(vec![(0..data.len()).collect()]);
    }

    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::rng(seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for class in 0..data.n_classes() {
        let mut members: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels()[i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let cumulative: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws
                .iter()
                .scan(0.0, |acc, d| {
                    *acc += d / total;
                    Some(*acc)
                })
                .collect()
        } else {
            // Every gamma draw underflowed: put the class on one client.
            let winner = rng.random_range(0..n_clients);
            (0..n_clients)
                .map(|k| if k >= winner { 1.0 } else { 0.0 })
                .collect()
        };
        for i in members {
            let u: f64 = rng.random();
            let client = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(n_clients - 1);
            shards[client].push(i);
        }
    }

    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let largest = (0..n_clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let stolen = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(stolen);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled train/valid/test split. Valid and test sizes round down, the
/// remainder goes to train.
pub fn split_tvt(indices: &[usize], ratios: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    if indices.len() < 3 {
        return Err(Error::invalid(format!(
            "split_tvt: need at least 3 samples, got {}",
            indices.len()
        )));
    }
    let (r_train, r_valid, r_test) = ratios;
    if [r_train, r_valid, r_test].iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::invalid("split_tvt: ratios must be non-negative"));
    }
    let total = r_train + r_valid + r_test;
    let n = indices.len();
    let n_valid = (n as f64 * r_valid / total + 1e-9).floor() as usize;
    let n_test = (n as f64 * r_test / total + 1e-9).floor() as usize;
    let n_train = n - n_valid - n_test;
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut rng::rng(seed));
    Ok(SplitIndices {
        train: shuffled[..n_train].to_vec(),
        valid: shuffled[n_train..n_train + n_valid].to_vec(),
        test: shuffled[n_train + n_valid..].to_vec(),
    })
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_CLIENTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    n_features: usize,
    n_classes: usize,
}

impl FederatedDataset {
    pub fn new(clients: Vec<ClientData>) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::invalid("federated dataset needs at least one client"))?;
        let (n_features, n_classes) = (first.train.n_features(), first.train.n_classes());
        for (i, c) in clients.iter().enumerate() {
            if c.train.is_empty() {
                return Err(Error::invalid(format!("client {i} has an empty train split")));
            }
            for d in [&c.train, &c.valid, &c.test] {
                if d.n_features() != n_features || d.n_classes() != n_classes {
                    return Err(Error::ShapeMismatch(format!(
                        "client {i} shape differs from client 0"
                    )));
                }
            }
        }
        Ok(FederatedDataset {
            clients,
            n_features,
            n_classes,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Total number of samples over every split of every client.
    pub fn n_samples(&self) -> usize {
        self.clients
            .iter()
            .map(|c| c.train.len() + c.valid.len() + c.test.len())
            .sum()
    }
}

/// Partitions `data` over `n_clients` with [`lda_split`] and splits every
/// shard 80/10/10. Shards too small to split keep all samples for training.
pub fn federate(data: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<FederatedDataset> {
    let shards = lda_split(data, n_clients, alpha, mix(seed, 0x5B11))?;
    let clients = shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            if shard.len() < 3 {
                return ClientData {
                    train: data.subset(shard),
                    valid: Dataset::empty(data.n_features(), data.n_classes()),
                    test: Dataset::empty(data.n_features(), data.n_classes()),
                };
            }
            let s = split_tvt(shard, DEFAULT_RATIOS, mix(seed, 0x7E57 + k as u64))
                .expect("shard has at least 3 samples");
            ClientData {
                train: data.subset(&s.train),
                valid: data.subset(&s.valid),
                test: data.subset(&s.test),
            }
        })
        .collect();
    FederatedDataset::new(clients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_labels_factorized_in_order() {
        let f = write_csv("x,y,label\n1,2,a\n3,4,b\n5,6,a\n");
        let d = load_csv(f.path(), "label").unwrap();
        assert_eq!(d.labels(), &[0, 1, 0]);
        assert_eq!(d.n_classes(), 2);
        assert_eq!(d.n_features(), 2);
        // Standardized: column x = 1,3,5 -> mean 3, population sd sqrt(8/3).
        let sd = (8.0f64 / 3.0).sqrt();
        assert!((d.row(0)[0] + 2.0 / sd).abs() < 1e-12);
    }

    #[test]
    fn csv_constant_column_becomes_zero() {
        let f = write_csv("c,x,label\n7,1,a\n7,2,b\n7,3,a\n");
        let d = load_csv(f.path(), "label").unwrap();
        assert!((0..3).all(|i| d.row(i)[0] == 0.0));
    }

    #[test]
    fn csv_errors() {
        let f = write_csv("x,y\n1,2\n");
        assert!(load_csv(f.path(), "label").is_err());
        let f = write_csv("x,label\n1,a\nfoo,b\n");
        assert!(matches!(load_csv(f.path(), "label"), Err(Error::Parse(_))));
        let f = write_csv("x,label\n1,a\n2,a\n");
        assert!(load_csv(f.path(), "label").is_err());
        assert!(matches!(
            load_csv(Path::new("/nonexistent/file.csv"), "label"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn blobs_deterministic_and_balanced() {
        let a = synth_blobs(10, 3, 4, 0.1, 7).unwrap();
        let b = synth_blobs(10, 3, 4, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![3, 3, 2, 2]);
        assert_ne!(a, synth_blobs(10, 3, 4, 0.1, 8).unwrap());
    }

    #[test]
    fn lda_single_client_takes_everything() {
        let d = synth_blobs(20, 2, 2, 0.5, 0).unwrap();
        let s = lda_split(&d, 1, 0.5, 0).unwrap();
        assert_eq!(s, vec![(0..20).collect::<Vec<_>>()]);
    }

    #[test]
    fn lda_is_a_partition_with_nonempty_clients() {
        let d = synth_blobs(50, 2, 5, 0.5, 3).unwrap();
        for seed in 0..20 {
            for alpha in [0.01, 0.5, 100.0] {
                let shards = lda_split(&d, 7, alpha, seed).unwrap();
                assert!(shards.iter().all(|s| !s.is_empty()));
                let mut all: Vec<usize> = shards.concat();
                all.sort_unstable();
                assert_eq!(all, (0..50).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn lda_too_many_clients() {
        let d = synth_blobs(4, 2, 2, 0.5, 0).unwrap();
        assert!(lda_split(&d, 5, 0.5, 0).is_err());
    }

    #[test]
    fn lda_large_alpha_is_near_iid() {
        let d = synth_blobs(2000, 2, 2, 0.5, 0).unwrap();
        for seed in 0..20 {
            let shards = lda_split(&d, 2, 1000.0, seed).unwrap();
            for s in &shards {
                let share = s.iter().filter(|&&i| d.labels()[i] == 0).count() as f64
                    / s.len() as f64;
                assert!((0.45..=0.55).contains(&share), "seed {seed}: share {share}");
            }
        }
    }

    #[test]
    fn lda_total_variation_small_for_large_alpha() {
        let d = synth_blobs(2000, 2, 4, 0.5, 1).unwrap();
        for seed in 0..10 {
            for s in lda_split(&d, 5, 1000.0, seed).unwrap() {
                let mut counts = [0usize; 4];
                for &i in &s {
                    counts[d.labels()[i]] += 1;
                }
                let tv: f64 = counts
                    .iter()
                    .map(|&c| (c as f64 / s.len() as f64 - 0.25).abs())
                    .sum::<f64>()
                    / 2.0;
                assert!(tv < 0.1, "tv {tv}");
            }
        }
    }

    #[test]
    fn lda_small_alpha_is_skewed() {
        let d = synth_blobs(400, 2, 4, 0.5, 2).unwrap();
        let skewed = (0..20)
            .filter(|&seed| {
                lda_split(&d, 5, 0.1, seed).unwrap().iter().any(|s| {
                    let mut counts = [0usize; 4];
                    for &i in s {
                        counts[d.labels()[i]] += 1;
                    }
                    *counts.iter().max().unwrap() as f64 / s.len() as f64 > 0.6
                })
            })
            .count();
        assert!(skewed > 10, "only {skewed}/20 seeds skewed");
    }

    #[test]
    fn split_sizes() {
        let s = split_tvt(&(0..10).collect::<Vec<_>>(), DEFAULT_RATIOS, 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        let s = split_tvt(&(0..100).collect::<Vec<_>>(), DEFAULT_RATIOS, 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let again = split_tvt(&(0..100).collect::<Vec<_>>(), DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(s, again);
        assert!(split_tvt(&[0, 1], DEFAULT_RATIOS, 1).is_err());
    }

    #[test]
    fn federate_keeps_every_sample() {
        let d = synth_blobs(300, 4, 3, 0.5, 0).unwrap();
        let f = federate(&d, 5, 0.5, 9).unwrap();
        assert_eq!(f.n_clients(), 5);
        assert_eq!(f.n_samples(), 300);
        assert_eq!(f, federate(&d, 5, 0.5, 9).unwrap());
    }
}
