//! Dataset ingestion, synthetic anomaly generation, and non-IID partitioning.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::seed::{self, Stream};

/// Population mean and standard deviation of one feature column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    pub const IDENTITY: ColumnStats = ColumnStats { mean: 0.0, std: 1.0 };
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub feature_names: Vec<String>,
    pub scaling_stats: Vec<ColumnStats>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>, feature_names: Vec<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                actual: labels.len(),
                context: "dataset labels",
            });
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: features.ncols(),
                actual: feature_names.len(),
                context: "feature names",
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        let d = features.ncols();
        Ok(Dataset {
            features,
            labels,
            feature_names,
            scaling_stats: vec![ColumnStats::IDENTITY; d],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            feature_names: self.feature_names.clone(),
            scaling_stats: self.scaling_stats.clone(),
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select(Axis(0), rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    /// Apply `(x - mean) / std` column-wise.
    pub fn apply_scaling(&mut self, stats: &[ColumnStats]) -> Result<()> {
        if stats.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                actual: stats.len(),
                context: "scaling stats",
            });
        }
        for (mut col, s) in self.features.axis_iter_mut(Axis(1)).zip(stats) {
            col.mapv_inplace(|x| (x - s.mean) / s.std);
        }
        Ok(())
    }
}

/// Population statistics per column. Constant columns get `std = 1`.
pub fn column_stats(features: ArrayView2<f64>) -> Vec<ColumnStats> {
    features
        .axis_iter(Axis(1))
        .map(|col| {
            let n = col.len().max(1) as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            ColumnStats {
                mean,
                std: if std > 0.0 { std } else { 1.0 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub label_column: String,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    /// Raw label string -> class. Defaults to `{"0": 0, "1": 1}`.
    #[serde(default = "default_label_map")]
    pub label_map: BTreeMap<String, u8>,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_label_map() -> BTreeMap<String, u8> {
    BTreeMap::from([("0".to_string(), 0), ("1".to_string(), 1)])
}

fn default_true() -> bool {
    true
}

impl CsvOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        CsvOptions {
            label_column: label_column.into(),
            categorical_columns: Vec::new(),
            label_map: default_label_map(),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

enum ColumnKind {
    Numeric,
    Categorical(Vec<String>),
    Label,
}

/// Read a headered CSV, one-hot the categorical columns, z-score the numeric
/// ones, and map labels. Rows with unparseable cells are dropped and counted.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<(Dataset, LoadReport)> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let headers: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let label_idx = headers.iter().position(|h| *h == opts.label_column).ok_or_else(|| {
        Error::Data(format!(
            "{}: missing label column `{}`",
            path.display(),
            opts.label_column
        ))
    })?;
    for c in &opts.categorical_columns {
        if !headers.contains(c) {
            return Err(Error::Data(format!(
                "{}: unknown categorical column `{c}`",
                path.display()
            )));
        }
    }

    let records: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }

    let is_categorical = |i: usize| opts.categorical_columns.contains(&headers[i]);
    let parse_row = |rec: &csv::StringRecord| -> Option<(Vec<f64>, u8)> {
        if rec.len() != headers.len() {
            return None;
        }
        let label = *opts.label_map.get(&rec[label_idx])?;
        if label > 1 {
            return None;
        }
        let mut numeric = Vec::new();
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx || is_categorical(i) {
                continue;
            }
            let v: f64 = cell.parse().ok()?;
            if !v.is_finite() {
                return None;
            }
            numeric.push(v);
        }
        Some((numeric, label))
    };

    let mut kept = Vec::with_capacity(records.len());
    for rec in &records {
        if let Some((numeric, label)) = parse_row(rec) {
            kept.push((rec, numeric, label));
        }
    }
    let report = LoadReport {
        rows_read: records.len(),
        rows_dropped: records.len() - kept.len(),
    };
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "{}: all {} rows dropped as unparseable",
            path.display(),
            records.len()
        )));
    }

    let kinds: Vec<ColumnKind> = (0..headers.len())
        .map(|i| {
            if i == label_idx {
                ColumnKind::Label
            } else if is_categorical(i) {
                let levels: BTreeSet<&str> = kept.iter().map(|(rec, _, _)| &rec[i]).collect();
                ColumnKind::Categorical(levels.into_iter().map(str::to_string).collect())
            } else {
                ColumnKind::Numeric
            }
        })
        .collect();

    let mut names = Vec::new();
    let mut numeric_cols = Vec::new();
    for (i, kind) in kinds.iter().enumerate() {
        match kind {
            ColumnKind::Label => {}
            ColumnKind::Numeric => {
                numeric_cols.push(names.len());
                names.push(headers[i].clone());
            }
            ColumnKind::Categorical(levels) => {
                names.extend(levels.iter().map(|l| format!("{}={l}", headers[i])));
            }
        }
    }

    let mut features = Array2::<f64>::zeros((kept.len(), names.len()));
    let mut labels = Vec::with_capacity(kept.len());
    for (r, (rec, numeric, label)) in kept.iter().enumerate() {
        let mut col = 0;
        let mut next_numeric = numeric.iter();
        for (i, kind) in kinds.iter().enumerate() {
            match kind {
                ColumnKind::Label => {}
                ColumnKind::Numeric => {
                    features[[r, col]] = *next_numeric.next().expect("parsed per numeric column");
                    col += 1;
                }
                ColumnKind::Categorical(levels) => {
                    let hit = levels
                        .iter()
                        .position(|l| l == &rec[i])
                        .expect("level collected from kept rows");
                    features[[r, col + hit]] = 1.0;
                    col += levels.len();
                }
            }
        }
        labels.push(*label);
    }

    let mut ds = Dataset::new(features, labels, names)?;
    if opts.standardize {
        let numeric_stats = column_stats(ds.features.select(Axis(1), &numeric_cols).view());
        let mut stats = vec![ColumnStats::IDENTITY; ds.n_features()];
        for (&c, s) in numeric_cols.iter().zip(numeric_stats) {
            stats[c] = s;
        }
        ds.apply_scaling(&stats)?;
        ds.scaling_stats = stats;
    }
    Ok((ds, report))
}

/// Write features plus a trailing `label` column.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = ds.feature_names.clone();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for (row, label) in ds.features.axis_iter(Axis(0)).zip(&ds.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Gaussian normals around the origin and anomalies shifted by
/// `separation` along the fixed unit vector `(1, ..., 1) / sqrt(d)`.
pub fn synth_anomaly(n: usize, d: usize, anomaly_frac: f64, separation: f64, seed: u64) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::config("dataset.d", "must be >= 1"));
    }
    if !(anomaly_frac > 0.0 && anomaly_frac < 1.0) {
        return Err(Error::config("dataset.anomaly_frac", "must lie in (0, 1)"));
    }
    let n_anom = (n as f64 * anomaly_frac + 1e-9).floor() as usize;
    if n_anom < 1 || n_anom >= n {
        return Err(Error::config(
            "dataset.n",
            "n * anomaly_frac must leave at least one row of each class",
        ));
    }
    let mut rng = seed::stream_rng(seed, Stream::Synth, &[]);
    let shift = separation / (d as f64).sqrt();
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_anom)).collect();
    labels.shuffle(&mut rng);
    let mut features = Array2::<f64>::zeros((n, d));
    for (mut row, &label) in features.axis_iter_mut(Axis(0)).zip(&labels) {
        let offset = if label == 1 { shift } else { 0.0 };
        for x in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = z + offset;
        }
    }
    Dataset::new(features, labels, (0..d).map(|j| format!("f{j}")).collect())
}

/// Stratified hold-out split: `(train, test)`. Each class with at least two
/// rows contributes at least one row to each side.
pub fn split_stratified(ds: &Dataset, test_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::config("test_frac", "must lie in (0, 1)"));
    }
    let mut rng = seed::stream_rng(seed, Stream::Split, &[]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..=1u8 {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let mut n_test = (idx.len() as f64 * test_frac).round() as usize;
        if idx.len() >= 2 {
            n_test = n_test.clamp(1, idx.len() - 1);
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Row indices owned by each client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }
}

const PARTITION_RETRIES: usize = 100;

/// Dirichlet label-skew partition over all rows.
pub fn partition_dirichlet(labels: &[u8], num_clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    partition_dirichlet_with_coverage(labels, num_clients, alpha, 1.0, seed)
}

/// Dirichlet label-skew partition over a random `coverage` fraction of rows.
///
/// For every label, per-client proportions are drawn from
/// `Dirichlet(alpha, ..., alpha)` and the shuffled rows of that label are cut
/// at the cumulative proportions. Draws repeat until every client holds at
/// least one row.
pub fn partition_dirichlet_with_coverage(
    labels: &[u8],
    num_clients: usize,
    alpha: f64,
    coverage: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("num_clients", "must be >= 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("partition_alpha", "must be positive and finite"));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::config("partition coverage", "must lie in (0, 1]"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config("partition_alpha", e.to_string()))?;
    let mut rng = seed::stream_rng(seed, Stream::Partition, &[]);

    let mut rows: Vec<usize> = (0..labels.len()).collect();
    rows.shuffle(&mut rng);
    rows.truncate((labels.len() as f64 * coverage).round() as usize);
    let by_class: Vec<Vec<usize>> = (0..=1u8)
        .map(|c| rows.iter().copied().filter(|&r| labels[r] == c).collect())
        .collect();

    for _ in 0..=PARTITION_RETRIES {
        let mut assignments = vec![Vec::new(); num_clients];
        for class_rows in &by_class {
            let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0) {
                // every gamma draw underflowed; uniform fallback for this class
                for &r in class_rows {
                    assignments[rng.random_range(0..num_clients)].push(r);
                }
                continue;
            }
            let n = class_rows.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in draws.iter().enumerate() {
                cum += p / total;
                let end = if client + 1 == num_clients {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                assignments[client].extend_from_slice(&class_rows[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(Partition { assignments });
        }
    }
    Err(Error::PartitionInfeasible {
        retries: PARTITION_RETRIES,
    })
}
