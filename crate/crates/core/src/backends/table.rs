//! Lookup tables: every grid configuration evaluated at every fidelity grid
//! point, averaged over seeds, persisted as CSV.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{course_seed, Metrics, METRIC_NAMES};
use crate::dataflow::FederatedDataset;
use crate::engine::{decode_config, run_course_at};
use crate::error::{Error, Result};
use crate::space::{grid, Algorithm, FidelityVector, HyperConfig, SearchSpace};

/// Default number of seeds averaged per row.
pub const DEFAULT_SEEDS: usize = 3;
/// Default ceiling on course runs per table.
pub const DEFAULT_JOB_CAP: usize = 2_000_000;

/// Rounds metric values to 9 significant digits, the precision stored on disk.
pub fn quantize(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn fmt_metric(x: f64) -> String {
    format!("{x:.8e}")
}

/// Fidelity grid and seed count of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    /// Ascending round counts.
    pub rounds: Vec<u32>,
    pub sample_rates: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_cap")]
    pub job_cap: usize,
}

fn default_seeds() -> usize {
    DEFAULT_SEEDS
}

fn default_cap() -> usize {
    DEFAULT_JOB_CAP
}

impl TableSpec {
    pub fn new(rounds: Vec<u32>, sample_rates: Vec<f64>, n_seeds: usize) -> Result<Self> {
        let spec = TableSpec {
            rounds,
            sample_rates,
            n_seeds,
            job_cap: DEFAULT_JOB_CAP,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() || self.rounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("table rounds must be non-empty and strictly ascending"));
        }
        if self.sample_rates.is_empty()
            || self.sample_rates.iter().any(|&s| !(s > 0.0 && s <= 1.0))
        {
            return Err(Error::invalid("table sample rates must lie in (0, 1]"));
        }
        if self.n_seeds == 0 {
            return Err(Error::invalid("table needs at least one seed"));
        }
        Ok(())
    }

    pub fn n_fidelities(&self) -> usize {
        self.rounds.len() * self.sample_rates.len()
    }

    fn sample_rate_index(&self, s: f64) -> Option<usize> {
        self.sample_rates
            .iter()
            .position(|&x| x == s || (x - s).abs() <= 1e-9 * x.abs().max(s.abs()))
    }
}

/// Everything needed to interpret a table without its dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub task: String,
    pub algorithm: Algorithm,
    pub n_clients: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub spec: TableSpec,
    pub space: SearchSpace,
}

impl TableMeta {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: TableMeta = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let space = SearchSpace::new(m.space.dimensions.clone(), m.space.fidelity.clone())?;
        m.spec.validate()?;
        Ok(TableMeta { space, ..m })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub config: HyperConfig,
    pub fidelity: FidelityVector,
    pub metrics: Metrics,
    pub n_seeds: usize,
}

#[derive(Debug, Clone)]
pub struct LookupTable {
    pub meta: TableMeta,
    pub spec: TableSpec,
    /// Ordered by configuration grid rank, then rounds, then sample rate.
    pub rows: Vec<TableRow>,
}

/// `<dir>/<stem><suffix>` next to a table file.
pub fn sidecar(table: &Path, suffix: &str) -> PathBuf {
    let stem = table
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    table.with_file_name(format!("{stem}{suffix}"))
}

fn meta_path(table: &Path) -> PathBuf {
    sidecar(table, ".meta.toml")
}

fn seeds_path(table: &Path) -> PathBuf {
    sidecar(table, ".seeds.csv")
}

type Key = (usize, usize, usize);

impl LookupTable {
    fn index(&self, rank: usize, ri: usize, si: usize) -> usize {
        (rank * self.spec.rounds.len() + ri) * self.spec.sample_rates.len() + si
    }

    /// Stored metrics of an on-grid `(cfg, b)`.
    pub fn lookup(&self, cfg: &HyperConfig, b: &FidelityVector) -> Result<Metrics> {
        let rank = self.meta.space.grid_rank(&self.meta.space.grid_indices(cfg)?);
        let ri = self
            .spec
            .rounds
            .iter()
            .position(|&r| r == b.rounds)
            .ok_or_else(|| Error::GridMiss(format!("rounds={} is not a table fidelity", b.rounds)))?;
        let si = self.spec.sample_rate_index(b.sample_rate).ok_or_else(|| {
            Error::GridMiss(format!("sample_rate={} is not a table fidelity", b.sample_rate))
        })?;
        Ok(self.rows[self.index(rank, ri, si)].metrics)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn header(space: &SearchSpace, last: &str) -> Vec<String> {
        let mut h: Vec<String> = space.names().into_iter().map(String::from).collect();
        h.push("round".into());
        h.push("sample_rate".into());
        h.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
        h.push(last.into());
        h
    }

    fn record(cfg: &HyperConfig, b: &FidelityVector, m: &Metrics, last: usize) -> Vec<String> {
        let mut r: Vec<String> = cfg.values.iter().map(|v| v.to_string()).collect();
        r.push(b.rounds.to_string());
        r.push(b.sample_rate.to_string());
        r.extend(m.to_array().iter().map(|&v| fmt_metric(v)));
        r.push(last.to_string());
        r
    }

    /// Parses rows of a table or per-seed CSV, skipping malformed records
    /// (such as a line cut short by an interrupted run).
    fn read_records(
        path: &Path,
        meta: &TableMeta,
        last: &str,
    ) -> Result<Vec<(Key, Metrics, usize)>> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let expected = Self::header(&meta.space, last);
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
            .iter()
            .map(String::from)
            .collect();
        if header != expected {
            return Err(Error::Parse(format!(
                "{}: header does not match the table's search space",
                path.display()
            )));
        }
        let d = meta.space.len();
        let mut out = Vec::new();
        for rec in reader.records() {
            let Ok(rec) = rec else { continue };
            if rec.len() != expected.len() {
                continue;
            }
            let nums: Option<Vec<f64>> = rec.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
            let Some(nums) = nums else { continue };
            let cfg = HyperConfig::new(nums[..d].to_vec());
            let Ok(idx) = meta.space.grid_indices(&cfg) else {
                return Err(Error::GridMiss(format!(
                    "{}: row {:?} is off the search-space grid",
                    path.display(),
                    cfg.values
                )));
            };
            let rank = meta.space.grid_rank(&idx);
            let rounds = nums[d] as u32;
            let Some(ri) = meta.spec.rounds.iter().position(|&r| r == rounds) else { continue };
            let Some(si) = meta.spec.sample_rate_index(nums[d + 1]) else { continue };
            let mut m = [0.0; 9];
            m.copy_from_slice(&nums[d + 2..d + 11]);
            out.push(((rank, ri, si), Metrics::from_array(m), nums[d + 11] as usize));
        }
        Ok(out)
    }

    fn from_records(meta: TableMeta, records: Vec<(Key, Metrics, usize)>) -> Result<Self> {
        let spec = meta.spec.clone();
        let configs = grid(&meta.space);
        let total = configs.len() * spec.n_fidelities();
        let mut slots: Vec<Option<(Metrics, usize)>> = vec![None; total];
        let (nr, ns) = (spec.rounds.len(), spec.sample_rates.len());
        for ((rank, ri, si), m, n) in records {
            slots[(rank * nr + ri) * ns + si] = Some((m, n));
        }
        let missing = slots.iter().filter(|s| s.is_none()).count();
        if missing > 0 {
            return Err(Error::Parse(format!(
                "table incomplete: {missing} of {total} rows missing"
            )));
        }
        let mut rows = Vec::with_capacity(total);
        for (i, slot) in slots.into_iter().enumerate() {
            let (metrics, n_seeds) = slot.expect("checked above");
            if n_seeds != spec.n_seeds {
                return Err(Error::Parse(format!(
                    "row {i} averages {n_seeds} seeds, table declares {}",
                    spec.n_seeds
                )));
            }
            let rank = i / (nr * ns);
            rows.push(TableRow {
                config: configs[rank].clone(),
                fidelity: FidelityVector::new(spec.rounds[(i / ns) % nr], spec.sample_rates[i % ns]),
                metrics,
                n_seeds,
            });
        }
        Ok(LookupTable { meta, spec, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = read_meta(path)?;
        let records = Self::read_records(path, &meta, "n_seeds")?;
        Self::from_records(meta, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_meta(path, &self.meta)?;
        let rows = self
            .rows
            .iter()
            .map(|r| Self::record(&r.config, &r.fidelity, &r.metrics, r.n_seeds));
        write_csv_atomic(path, Self::header(&self.meta.space, "n_seeds"), rows)
    }

    /// Per-seed values stored beside the table at `path`, as
    /// `(config, fidelity, seed, metrics)`.
    pub fn load_seed_values(path: &Path) -> Result<Vec<(HyperConfig, FidelityVector, u64, Metrics)>> {
        let meta = read_meta(path)?;
        let configs = grid(&meta.space);
        let records = Self::read_records(&seeds_path(path), &meta, "seed")?;
        Ok(records
            .into_iter()
            .map(|((rank, ri, si), m, seed)| {
                (
                    configs[rank].clone(),
                    FidelityVector::new(meta.spec.rounds[ri], meta.spec.sample_rates[si]),
                    seed as u64,
                    m,
                )
            })
            .collect())
    }
}

fn read_meta(table: &Path) -> Result<TableMeta> {
    let p = meta_path(table);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    TableMeta::from_toml(&text)
}

fn write_meta(table: &Path, meta: &TableMeta) -> Result<()> {
    let p = meta_path(table);
    fs::write(&p, meta.to_toml()?).map_err(|e| Error::io(&p, e))
}

fn write_csv_atomic(
    path: &Path,
    header: Vec<String>,
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let tmp = sidecar(path, ".csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        for r in rows {
            w.write_record(&r).map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn append_writer(path: &Path, header: &[String]) -> Result<csv::Writer<File>> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !fresh {
        // Terminate a line cut short by an interrupted run.
        let mut last = [0u8; 1];
        file.seek(SeekFrom::End(-1)).map_err(|e| Error::io(path, e))?;
        file.read_exact(&mut last).map_err(|e| Error::io(path, e))?;
        if last[0] != b'\n' {
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| Error::Parse(e.to_string()))?;
    }
    Ok(w)
}

/// Outcome of [`generate_table`].
#[derive(Debug, Clone)]
pub struct TableBuild {
    pub table: LookupTable,
    /// Course runs executed by this call (0 when resuming a finished table).
    pub courses_run: usize,
}

/// Evaluates every grid configuration at every fidelity of `spec` with seeds
/// `0..n_seeds` and writes the seed means to `out`. Rows already on disk are
/// kept, so an interrupted run resumes where it stopped. Courses that share a
/// sample rate are trained once up to the largest round count.
pub fn generate_table(
    data: &FederatedDataset,
    task: &str,
    algorithm: Algorithm,
    space: &SearchSpace,
    spec: &TableSpec,
    out: &Path,
) -> Result<TableBuild> {
    spec.validate()?;
    space.check_algorithm(algorithm)?;
    let configs = grid(space);
    let jobs = configs.len() * spec.n_fidelities() * spec.n_seeds;
    if jobs > spec.job_cap {
        return Err(Error::CapExceeded {
            jobs,
            cap: spec.job_cap,
        });
    }
    let meta = TableMeta {
        task: task.to_string(),
        algorithm,
        n_clients: data.n_clients(),
        n_features: data.n_features(),
        n_classes: data.n_classes(),
        spec: spec.clone(),
        space: space.clone(),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if meta_path(out).exists() {
        let existing = read_meta(out)?;
        if existing != meta {
            return Err(Error::invalid(format!(
                "{} was generated with different settings; remove it to regenerate",
                out.display()
            )));
        }
    } else {
        write_meta(out, &meta)?;
    }

    let mut done: HashMap<Key, (Metrics, usize)> = HashMap::new();
    if out.exists() {
        for (k, m, n) in LookupTable::read_records(out, &meta, "n_seeds")? {
            done.insert(k, (m, n));
        }
    }
    let nr = spec.rounds.len();
    let units: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..spec.sample_rates.len()).map(move |s| (c, s)))
        .filter(|&(c, s)| (0..nr).any(|r| !done.contains_key(&(c, r, s))))
        .collect();
    let total_units = configs.len() * spec.sample_rates.len();
    if !units.is_empty() {
        log::info!(
            "{task}/{algorithm}: {} of {total_units} (config, sample_rate) units to run, {} seeds each",
            units.len(),
            spec.n_seeds
        );
    }

    let main_header = LookupTable::header(space, "n_seeds");
    let seed_header = LookupTable::header(space, "seed");
    let chunk = (rayon::current_num_threads() * 16).max(32);
    let mut courses_run = 0;
    for (ci, batch) in units.chunks(chunk).enumerate() {
        let results: Vec<Result<Vec<(Key, Vec<Metrics>)>>> = batch
            .par_iter()
            .map(|&(c, s)| {
                let cfg = &configs[c];
                let decoded = decode_config(space, cfg);
                let mut per_round: Vec<Vec<Metrics>> = vec![Vec::with_capacity(spec.n_seeds); nr];
                for seed in 0..spec.n_seeds as u64 {
                    let (at, _) = run_course_at(
                        data,
                        algorithm,
                        decoded,
                        spec.sample_rates[s],
                        &spec.rounds,
                        course_seed(seed, cfg),
                    )?;
                    for (ri, (_, g)) in at.into_iter().enumerate() {
                        per_round[ri].push(g.into());
                    }
                }
                Ok(per_round
                    .into_iter()
                    .enumerate()
                    .map(|(ri, ms)| ((c, ri, s), ms))
                    .collect())
            })
            .collect();
        let mut seeds_w = append_writer(&seeds_path(out), &seed_header)?;
        let mut main_w = append_writer(out, &main_header)?;
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        for unit in results {
            for ((c, ri, s), per_seed) in unit? {
                let b = FidelityVector::new(spec.rounds[ri], spec.sample_rates[s]);
                for (seed, m) in per_seed.iter().enumerate() {
                    let q = Metrics::from_array(m.to_array().map(quantize));
                    seeds_w
                        .write_record(LookupTable::record(&configs[c], &b, &q, seed))
                        .map_err(csv_err)?;
                }
                let mean = Metrics::from_array(Metrics::mean(&per_seed).to_array().map(quantize));
                main_w
                    .write_record(LookupTable::record(&configs[c], &b, &mean, spec.n_seeds))
                    .map_err(csv_err)?;
                done.insert((c, ri, s), (mean, spec.n_seeds));
            }
        }
        seeds_w.flush().map_err(|e| Error::io(out, e))?;
        main_w.flush().map_err(|e| Error::io(out, e))?;
        courses_run += batch.len() * spec.n_seeds;
        log::info!(
            "{task}/{algorithm}: {}/{} units done",
            ((ci + 1) * chunk).min(units.len()),
            units.len()
        );
    }

    let table = LookupTable::from_records(
        meta,
        done.into_iter().map(|(k, (m, n))| (k, m, n)).collect(),
    )?;
    if courses_run > 0 {
        table.save(out)?;
        rewrite_seed_file(out, &table)?;
    }
    Ok(TableBuild { table, courses_run })
}

/// Rewrites the per-seed sidecar in canonical row order, dropping duplicates.
fn rewrite_seed_file(out: &Path, table: &LookupTable) -> Result<()> {
    let meta = &table.meta;
    let path = seeds_path(out);
    let mut by_key: HashMap<(Key, usize), Metrics> = HashMap::new();
    for (k, m, seed) in LookupTable::read_records(&path, meta, "seed")? {
        by_key.insert((k, seed), m);
    }
    let mut keys: Vec<(Key, usize)> = by_key.keys().copied().collect();
    keys.sort_unstable();
    let configs = grid(&meta.space);
    let rows = keys.into_iter().map(|((c, ri, s), seed)| {
        let b = FidelityVector::new(meta.spec.rounds[ri], meta.spec.sample_rates[s]);
        LookupTable::record(&configs[c], &b, &by_key[&((c, ri, s), seed)], seed)
    });
    write_csv_atomic(&path, LookupTable::header(&meta.space, "seed"), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BenchmarkHandle;
    use crate::dataflow::{federate, synth_blobs};
    use crate::space::{Dimension, FidelitySpace};
    use crate::sysmodel::SystemConfig;
    use std::sync::Arc;

    fn small_space() -> SearchSpace {
        SearchSpace::new(
            vec![
                Dimension::continuous("learning_rate", 0.01, 1.0, true, 3).unwrap(),
                Dimension::integer("step_size", 1.0, 2.0, false, 2).unwrap(),
            ],
            FidelitySpace::new(1, 10, vec![0.5, 1.0]).unwrap(),
        )
        .unwrap()
    }

    fn data() -> FederatedDataset {
        federate(&synth_blobs(120, 3, 2, 0.7, 3).unwrap(), 4, 0.5, 3).unwrap()
    }

    #[test]
    fn quantize_keeps_nine_digits() {
        assert_eq!(quantize(0.123456789123), 0.123456789);
        assert_eq!(quantize(quantize(std::f64::consts::PI)), quantize(std::f64::consts::PI));
        assert_eq!(fmt_metric(1.0), "1.00000000e0");
    }

    #[test]
    fn six_configs_two_fidelities_three_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t.csv");
        let d = data();
        let spec = TableSpec::new(vec![2, 4], vec![1.0], 3).unwrap();
        let space = small_space();
        let build = generate_table(&d, "blobs", Algorithm::FedAvg, &space, &spec, &out).unwrap();
        assert_eq!(build.table.len(), 12);
        assert_eq!(build.courses_run, 18);
        let again = generate_table(&d, "blobs", Algorithm::FedAvg, &space, &spec, &out).unwrap();
        assert_eq!(again.courses_run, 0);
        let loaded = LookupTable::load(&out).unwrap();
        assert_eq!(loaded.rows, build.table.rows);

        let raw = BenchmarkHandle::raw("blobs", Arc::new(d), Algorithm::FedAvg, space.clone(), SystemConfig::default())
            .unwrap();
        let row = &loaded.rows[7];
        let runs: Vec<Metrics> = (0..3).map(|s| raw.query(&row.config, &row.fidelity, s).unwrap().0).collect();
        let mean = Metrics::from_array(Metrics::mean(&runs).to_array().map(quantize));
        assert_eq!(mean, row.metrics);
        let seeds = LookupTable::load_seed_values(&out).unwrap();
        assert_eq!(seeds.len(), 36);
    }

    #[test]
    fn resumes_partial_tables() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t.csv");
        let d = data();
        let spec = TableSpec::new(vec![1, 3], vec![0.5, 1.0], 1).unwrap();
        let space = small_space();
        let full = generate_table(&d, "blobs", Algorithm::FedAvg, &space, &spec, &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // Keep the header and the first 10 rows plus half of a row.
        let partial = format!("{}\n{}", lines[..11].join("\n"), &lines[11][..10]);
        fs::write(&out, partial).unwrap();
        let resumed = generate_table(&d, "blobs", Algorithm::FedAvg, &space, &spec, &out).unwrap();
        assert!(resumed.courses_run > 0 && resumed.courses_run < full.courses_run);
        assert_eq!(resumed.table.rows, full.table.rows);
        assert_eq!(fs::read_to_string(&out).unwrap(), text);
    }

    #[test]
    fn cap_and_grid_miss() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t.csv");
        let d = data();
        let mut spec = TableSpec::new(vec![1, 2], vec![1.0], 3).unwrap();
        spec.job_cap = 10;
        let space = small_space();
        assert!(matches!(
            generate_table(&d, "x", Algorithm::FedAvg, &space, &spec, &out),
            Err(Error::CapExceeded { jobs: 36, cap: 10 })
        ));
        spec.job_cap = 100;
        spec.n_seeds = 1;
        let t = generate_table(&d, "x", Algorithm::FedAvg, &space, &spec, &out).unwrap().table;
        let on = HyperConfig::new(vec![0.1, 2.0]);
        assert!(t.lookup(&on, &FidelityVector::new(2, 1.0)).is_ok());
        let off = HyperConfig::new(vec![0.2, 2.0]);
        assert!(matches!(t.lookup(&off, &FidelityVector::new(2, 1.0)), Err(Error::GridMiss(_))));
        assert!(matches!(t.lookup(&on, &FidelityVector::new(3, 1.0)), Err(Error::GridMiss(_))));
    }
}
