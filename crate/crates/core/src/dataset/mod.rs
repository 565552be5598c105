//! CMAPSS ingestion, feature projection, RUL labels, normalization and
//! partitioning of training units across workers.
//!
//! Source rows have 26 whitespace-separated columns: unit, cycle, three
//! operating settings and 21 sensors. The default projection keeps 16 of them
//! (operating settings 1-2 and the 14 informative sensors), addressed by
//! 1-based column position.

pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RAW_COLUMNS: usize = 26;
pub const FEATURE_COUNT: usize = 16;
pub const DEFAULT_RUL_CAP: u32 = 125;
/// 1-based positions of the selected columns within a raw row.
pub const DEFAULT_FEATURE_COLUMNS: [usize; FEATURE_COUNT] =
    [3, 4, 6, 7, 8, 11, 12, 13, 15, 16, 17, 18, 19, 21, 24, 25];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: malformed row: {reason}")]
    MalformedRow {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}: unit {unit} cycles are not 1, 2, 3, ... (found {found} after {previous})")]
    BadCycles {
        file: String,
        unit: u32,
        previous: u32,
        found: u32,
    },
    #[error("RUL file lists {ruls} entries but the test split has {units} units")]
    RulCountMismatch { ruls: usize, units: usize },
    #[error("invalid worker count {k} for {units} units")]
    InvalidWorkerCount { k: usize, units: usize },
    #[error("invalid feature column {0}: must be within 1..={RAW_COLUMNS}")]
    BadFeatureColumn(usize),
    #[error("invalid validation fraction {0}")]
    BadValidationFraction(f64),
    #[error("unknown subset {0:?}")]
    UnknownSubset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::FD001, Subset::FD002, Subset::FD003, Subset::FD004];

    pub fn name(self) -> &'static str {
        match self {
            Subset::FD001 => "FD001",
            Subset::FD002 => "FD002",
            Subset::FD003 => "FD003",
            Subset::FD004 => "FD004",
        }
    }

    pub fn train_file(self) -> String {
        format!("train_{}.txt", self.name())
    }

    pub fn test_file(self) -> String {
        format!("test_{}.txt", self.name())
    }

    pub fn rul_file(self) -> String {
        format!("RUL_{}.txt", self.name())
    }

    pub fn paths(self, dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
        (
            dir.join(self.train_file()),
            dir.join(self.test_file()),
            dir.join(self.rul_file()),
        )
    }

    /// True if all three source files exist under `dir`.
    pub fn present_in(self, dir: &Path) -> bool {
        let (a, b, c) = self.paths(dir);
        a.is_file() && b.is_file() && c.is_file()
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Subset::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DataError::UnknownSubset(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub unit_id: u32,
    pub cycle: u32,
    pub op_settings: [f64; 3],
    pub sensors: [f64; 21],
}

impl RawRecord {
    pub fn from_row(row: &[f64; RAW_COLUMNS]) -> Self {
        let mut op_settings = [0.0; 3];
        op_settings.copy_from_slice(&row[2..5]);
        let mut sensors = [0.0; 21];
        sensors.copy_from_slice(&row[5..]);
        Self {
            unit_id: row[0] as u32,
            cycle: row[1] as u32,
            op_settings,
            sensors,
        }
    }

    pub fn to_row(&self) -> [f64; RAW_COLUMNS] {
        let mut row = [0.0; RAW_COLUMNS];
        row[0] = f64::from(self.unit_id);
        row[1] = f64::from(self.cycle);
        row[2..5].copy_from_slice(&self.op_settings);
        row[5..].copy_from_slice(&self.sensors);
        row
    }
}

/// Parses one whitespace-separated source line.
pub fn parse_row(line: &str) -> Result<RawRecord, String> {
    let mut row = [0.0; RAW_COLUMNS];
    let mut count = 0;
    for token in line.split_whitespace() {
        if count < RAW_COLUMNS {
            row[count] = token
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("non-numeric field {token:?}"))?;
        }
        count += 1;
    }
    if count != RAW_COLUMNS {
        return Err(format!("expected {RAW_COLUMNS} fields, found {count}"));
    }
    for (name, value) in [("unit", row[0]), ("cycle", row[1])] {
        if value < 1.0 || value.fract() != 0.0 || value > f64::from(u32::MAX) {
            return Err(format!("{name} must be a positive integer, found {value}"));
        }
    }
    Ok(RawRecord::from_row(&row))
}

/// Parses every non-blank line of a source file.
pub fn parse_records(text: &str, file: &str) -> Result<Vec<RawRecord>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_row(l).map_err(|reason| DataError::MalformedRow {
                file: file.to_string(),
                line: i + 1,
                reason,
            })
        })
        .collect()
}

pub type FeatureVector = [f64; FEATURE_COUNT];

/// Fixed projection from raw rows to feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub columns: [usize; FEATURE_COUNT],
}

impl Default for FeatureMap {
    fn default() -> Self {
        Self {
            columns: DEFAULT_FEATURE_COLUMNS,
        }
    }
}

impl FeatureMap {
    pub fn new(columns: [usize; FEATURE_COUNT]) -> Result<Self, DataError> {
        if let Some(&bad) = columns.iter().find(|&&c| !(1..=RAW_COLUMNS).contains(&c)) {
            return Err(DataError::BadFeatureColumn(bad));
        }
        Ok(Self { columns })
    }

    pub fn select(&self, record: &RawRecord) -> FeatureVector {
        let row = record.to_row();
        self.columns.map(|c| row[c - 1])
    }
}

pub fn select_features(record: &RawRecord) -> FeatureVector {
    FeatureMap::default().select(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// One engine's time-ordered trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSeries {
    pub unit_id: u32,
    pub cycles: Vec<u32>,
    pub features: Vec<FeatureVector>,
    /// RUL label per row.
    pub labels: Vec<f64>,
    /// Ground-truth RUL after the last observed cycle (test split only).
    pub final_rul: Option<u32>,
}

impl UnitSeries {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    pub fn last_cycle(&self) -> u32 {
        self.cycles.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: FeatureVector,
    pub std: FeatureVector,
}

impl NormStats {
    /// Per-feature mean and population standard deviation over every row.
    pub fn fit(dataset: &Dataset) -> Self {
        let n = dataset.row_count() as f64;
        let mut mean = [0.0; FEATURE_COUNT];
        for x in dataset.units.iter().flat_map(|u| &u.features) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; FEATURE_COUNT];
        for x in dataset.units.iter().flat_map(|u| &u.features) {
            for j in 0..FEATURE_COUNT {
                var[j] += (x[j] - mean[j]).powi(2);
            }
        }
        Self {
            mean,
            std: var.map(|v| (v / n).sqrt()),
        }
    }

    pub fn apply(&self, x: &FeatureVector) -> FeatureVector {
        std::array::from_fn(|j| {
            if self.std[j] > 0.0 {
                (x[j] - self.mean[j]) / self.std[j]
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub units: Vec<UnitSeries>,
    /// Statistics this dataset was normalized with, if any.
    pub norm_stats: Option<NormStats>,
}

impl Dataset {
    /// Groups records into per-unit sequences sorted by unit id. Labels are the
    /// uncapped cycles-to-end for training data and are filled from the RUL
    /// file for test data by [`load_cmapss`].
    pub fn from_records(
        split: Split,
        records: &[RawRecord],
        features: &FeatureMap,
        file: &str,
    ) -> Result<Self, DataError> {
        let mut grouped: BTreeMap<u32, Vec<&RawRecord>> = BTreeMap::new();
        for r in records {
            grouped.entry(r.unit_id).or_default().push(r);
        }
        let mut units = Vec::with_capacity(grouped.len());
        for (unit_id, mut rows) in grouped {
            rows.sort_by_key(|r| r.cycle);
            let mut previous = 0;
            for r in &rows {
                if r.cycle != previous + 1 {
                    return Err(DataError::BadCycles {
                        file: file.to_string(),
                        unit: unit_id,
                        previous,
                        found: r.cycle,
                    });
                }
                previous = r.cycle;
            }
            let last = previous;
            units.push(UnitSeries {
                unit_id,
                cycles: rows.iter().map(|r| r.cycle).collect(),
                features: rows.iter().map(|r| features.select(r)).collect(),
                labels: rows.iter().map(|r| f64::from(last - r.cycle)).collect(),
                final_rul: None,
            });
        }
        Ok(Self {
            split,
            units,
            norm_stats: None,
        })
    }

    pub fn row_count(&self) -> usize {
        self.units.iter().map(UnitSeries::len).sum()
    }

    pub fn unit_ids(&self) -> Vec<u32> {
        self.units.iter().map(|u| u.unit_id).collect()
    }

    pub fn unit(&self, unit_id: u32) -> Option<&UnitSeries> {
        self.units.iter().find(|u| u.unit_id == unit_id)
    }

    /// Copy restricted to `unit_ids` (kept in this dataset's order).
    pub fn subset(&self, unit_ids: &[u32]) -> Dataset {
        Dataset {
            split: self.split,
            units: self
                .units
                .iter()
                .filter(|u| unit_ids.contains(&u.unit_id))
                .cloned()
                .collect(),
            norm_stats: self.norm_stats,
        }
    }

    /// All rows flattened into a design matrix.
    pub fn samples(&self) -> Samples {
        let mut s = Samples::with_capacity(FEATURE_COUNT, self.row_count());
        for u in &self.units {
            for (x, y) in u.features.iter().zip(&u.labels) {
                s.push(x, *y);
            }
        }
        s
    }

    /// The last observed row of every unit: the standard test-set evaluation points.
    pub fn last_cycle_samples(&self) -> Samples {
        let mut s = Samples::with_capacity(FEATURE_COUNT, self.units.len());
        for u in self.units.iter().filter(|u| !u.is_empty()) {
            s.push(&u.features[u.len() - 1], u.labels[u.len() - 1]);
        }
        s
    }

    pub fn mean_label(&self) -> f64 {
        let n = self.row_count();
        if n == 0 {
            return 0.0;
        }
        self.units.iter().flat_map(|u| &u.labels).sum::<f64>() / n as f64
    }
}

/// Row-major design matrix with targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Samples {
    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            x: Vec::with_capacity(dim * rows),
            y: Vec::with_capacity(rows),
        }
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.y.push(y);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks(self.dim.max(1)).take(self.len())
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_rul_file(text: &str, file: &str) -> Result<Vec<u32>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .map_err(|_| DataError::MalformedRow {
                    file: file.to_string(),
                    line: i + 1,
                    reason: format!("expected a non-negative integer RUL, found {:?}", l.trim()),
                })
        })
        .collect()
}

/// Parses the three source files. Train labels are uncapped cycles-to-end;
/// test labels are `final_rul + (last_cycle - cycle)`.
pub fn load_cmapss(
    train_path: &Path,
    test_path: &Path,
    rul_path: &Path,
    features: &FeatureMap,
) -> Result<(Dataset, Dataset), DataError> {
    let name = |p: &Path| p.display().to_string();
    let train_records = parse_records(&read(train_path)?, &name(train_path))?;
    let test_records = parse_records(&read(test_path)?, &name(test_path))?;
    let ruls = parse_rul_file(&read(rul_path)?, &name(rul_path))?;
    let train = Dataset::from_records(Split::Train, &train_records, features, &name(train_path))?;
    let mut test = Dataset::from_records(Split::Test, &test_records, features, &name(test_path))?;
    attach_test_ruls(&mut test, &ruls)?;
    Ok((train, test))
}

pub fn load_subset(
    dir: &Path,
    subset: Subset,
    features: &FeatureMap,
) -> Result<(Dataset, Dataset), DataError> {
    let (train, test, rul) = subset.paths(dir);
    load_cmapss(&train, &test, &rul, features)
}

/// RUL entries are matched to test units in ascending unit order.
pub fn attach_test_ruls(test: &mut Dataset, ruls: &[u32]) -> Result<(), DataError> {
    if ruls.len() != test.units.len() {
        return Err(DataError::RulCountMismatch {
            ruls: ruls.len(),
            units: test.units.len(),
        });
    }
    for (unit, &rul) in test.units.iter_mut().zip(ruls) {
        let last = unit.last_cycle();
        unit.final_rul = Some(rul);
        unit.labels = unit
            .cycles
            .iter()
            .map(|&c| f64::from(rul + last - c))
            .collect();
    }
    Ok(())
}

/// Piecewise-linear labels: `min(last_cycle - cycle, cap)`.
pub fn compute_rul_labels(train: &Dataset, cap: u32) -> Dataset {
    let mut out = train.clone();
    for unit in &mut out.units {
        let last = unit.last_cycle();
        unit.labels = unit
            .cycles
            .iter()
            .map(|&c| f64::from((last - c).min(cap)))
            .collect();
    }
    out
}

/// Z-scores every feature with `stats`; zero-variance features map to 0.
pub fn normalize(dataset: &Dataset, stats: &NormStats) -> Dataset {
    let mut out = dataset.clone();
    for unit in &mut out.units {
        for x in &mut unit.features {
            *x = stats.apply(x);
        }
    }
    out.norm_stats = Some(*stats);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerShard {
    /// 1-based.
    pub worker_id: usize,
    pub units: Vec<u32>,
    pub n_rows: usize,
}

fn shuffled_units(train: &Dataset, seed: u64) -> Vec<u32> {
    let mut ids = train.unit_ids();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Shuffles unit ids with `seed` and deals them round-robin into `k` shards.
pub fn partition_workers(
    train: &Dataset,
    k: usize,
    seed: u64,
) -> Result<Vec<WorkerShard>, DataError> {
    let units = train.units.len();
    if k == 0 || k > units {
        return Err(DataError::InvalidWorkerCount { k, units });
    }
    let mut shards: Vec<WorkerShard> = (1..=k)
        .map(|worker_id| WorkerShard {
            worker_id,
            units: Vec::new(),
            n_rows: 0,
        })
        .collect();
    for (i, id) in shuffled_units(train, seed).into_iter().enumerate() {
        let shard = &mut shards[i % k];
        shard.units.push(id);
        shard.n_rows += train.unit(id).map_or(0, UnitSeries::len);
    }
    Ok(shards)
}

/// Holds out `fraction` of the training units (at least one, and at least one
/// left over). Returns `(validation_units, remaining_units)`.
pub fn split_validation(
    train: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadValidationFraction(fraction));
    }
    let ids = shuffled_units(train, seed);
    if ids.len() < 2 {
        return Err(DataError::InvalidWorkerCount {
            k: 1,
            units: ids.len(),
        });
    }
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut validation = ids[..n_val].to_vec();
    let mut rest = ids[n_val..].to_vec();
    validation.sort_unstable();
    rest.sort_unstable();
    Ok((validation, rest))
}
