//! Parameter sweeps over one axis and AUC comparisons between run sets.

use std::fs;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepAxis, SweepSpec};
use crate::error::{Error, Result};
use crate::experiment;
use crate::metrics::{self, Alternative, Summary, UTestResult};
use crate::seed::{self, Stream};
use crate::selection::{self, ThresholdRow};

/// Seed of repeat `r`; shared by every axis value so cells differ only by
/// the swept parameter.
pub fn cell_seed(base_seed: u64, repeat: u32) -> u64 {
    seed::derive_stream(base_seed, Stream::Sweep, &[u64::from(repeat)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub repeat: u32,
    pub seed: u64,
    pub error: Option<String>,
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub value: f64,
    pub runs: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub comm_time_s: f64,
    pub updates: f64,
    pub accepted_frac: f64,
}

pub fn cell_dir(out: &Path, value: f64, repeat: u32) -> PathBuf {
    out.join(format!("v{value}-r{repeat}"))
}

/// One run per `(value, repeat)`; a failing cell is recorded and the sweep
/// continues. With `out`, each cell writes a full run directory.
pub fn sweep(base: &ExperimentConfig, spec: &SweepSpec, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    base.validate()?;
    let cells: Vec<(f64, u32)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.repeats).map(move |r| (v, r)))
        .collect();
    let run_cell = |&(value, repeat): &(f64, u32)| -> SweepRow {
        let mut cfg = spec.apply(base, value);
        cfg.seed = cell_seed(base.seed, repeat);
        let outcome = match out {
            Some(dir) => experiment::run_to_dir(&cfg, &cell_dir(dir, value, repeat)).map(|o| o.summary),
            None => experiment::execute(&cfg).map(|r| experiment::summarize(&cfg, &r)),
        };
        let (summary, error) = match outcome {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        SweepRow {
            axis: spec.axis,
            value,
            repeat,
            seed: cfg.seed,
            error,
            summary,
        }
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<SweepRow> = cells.par_iter().map(run_cell).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<SweepRow> = cells.iter().map(run_cell).collect();

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("sweep.csv"), &rows_csv(&rows))?;
        let means = means(&rows);
        write_text(&dir.join("sweep_means.csv"), &means_csv(spec.axis, &means))?;
        if spec.axis == SweepAxis::Theta {
            write_text(
                &dir.join("threshold.csv"),
                &selection::threshold_csv(&threshold_rows(&means)),
            )?;
        }
    }
    Ok(rows)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Clients => "clients",
        SweepAxis::Batch => "batch",
        SweepAxis::Theta => "theta",
        SweepAxis::Dropout => "dropout",
    }
}

/// Merged per-cell CSV: `axis,value,repeat,seed,error` then the summary columns.
pub fn rows_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut header = vec!["axis", "value", "repeat", "seed", "error"];
    header.extend(metrics::SUMMARY_COLUMNS);
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let mut rec = vec![
            axis_name(r.axis).to_string(),
            r.value.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.error.clone().unwrap_or_default(),
        ];
        match &r.summary {
            Some(s) => {
                let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
                inner.serialize(s).expect("summary serializes");
                let bytes = inner.into_inner().expect("flush");
                let line = String::from_utf8(bytes).expect("utf8");
                let mut rd = csv::ReaderBuilder::new()
                    .has_headers(false)
                    .from_reader(line.as_bytes());
                let fields = rd.records().next().expect("one record").expect("valid csv");
                rec.extend(fields.iter().map(str::to_string));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), metrics::SUMMARY_COLUMNS.len())),
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-value means over successful repeats, in the order values were given.
pub fn means(rows: &[SweepRow]) -> Vec<SweepMean> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|value| {
            let ok: Vec<&Summary> = rows
                .iter()
                .filter(|r| r.value == value)
                .filter_map(|r| r.summary.as_ref())
                .collect();
            SweepMean {
                value,
                runs: ok.len(),
                accuracy: mean(ok.iter().map(|s| s.accuracy)),
                auc: mean(ok.iter().map(|s| s.auc)),
                comm_time_s: mean(ok.iter().map(|s| s.comm_time_s)),
                updates: mean(ok.iter().map(|s| s.updates as f64)),
                accepted_frac: mean(ok.iter().map(|s| s.accepted_frac)),
            }
        })
        .collect()
}

pub fn means_csv(axis: SweepAxis, means: &[SweepMean]) -> String {
    let mut out = format!(
        "{},runs,accuracy,auc,comm_time_s,updates,accepted_frac\n",
        axis_name(axis)
    );
    for m in means {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.value, m.runs, m.accuracy, m.auc, m.comm_time_s, m.updates, m.accepted_frac
        ));
    }
    out
}

pub fn threshold_rows(means: &[SweepMean]) -> Vec<ThresholdRow> {
    means
        .iter()
        .map(|m| ThresholdRow {
            theta: m.value,
            accuracy: m.accuracy,
            auc: m.auc,
            comm_time_s: m.comm_time_s,
            accepted_frac: m.accepted_frac,
        })
        .collect()
}

/// Minimum per-seed AUC values each side of a comparison needs.
pub const MIN_RUNS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n_a: usize,
    pub n_b: usize,
    pub mean_auc_a: f64,
    pub mean_auc_b: f64,
    pub two_sided: UTestResult,
    /// `a` tends to exceed `b`.
    pub greater: UTestResult,
    pub significant: bool,
}

impl Comparison {
    pub fn verdict(&self) -> &'static str {
        if self.significant {
            "significant"
        } else {
            "not significant"
        }
    }
}

/// All `summary.csv` files below `dir`, in sorted path order.
pub fn find_summaries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == metrics::SUMMARY_FILE) {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn collect_aucs(dir: &Path) -> Result<Vec<f64>> {
    let mut aucs = Vec::new();
    for path in find_summaries(dir)? {
        aucs.extend(
            metrics::read_summaries(&path)?
                .into_iter()
                .map(|s| s.auc)
                .filter(|a| a.is_finite()),
        );
    }
    Ok(aucs)
}

pub fn compare_values(a: &[f64], b: &[f64]) -> Result<Comparison> {
    let two_sided = metrics::mann_whitney_u(a, b, Alternative::TwoSided)?;
    let greater = metrics::mann_whitney_u(a, b, Alternative::Greater)?;
    Ok(Comparison {
        n_a: a.len(),
        n_b: b.len(),
        mean_auc_a: mean(a.iter().copied()),
        mean_auc_b: mean(b.iter().copied()),
        significant: two_sided.significant(0.05),
        two_sided,
        greater,
    })
}

/// Mann-Whitney U on the per-seed final AUCs found under two directories.
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<Comparison> {
    let a = collect_aucs(dir_a)?;
    let b = collect_aucs(dir_b)?;
    for (dir, v) in [(dir_a, &a), (dir_b, &b)] {
        if v.len() < MIN_RUNS {
            return Err(Error::InsufficientRuns {
                path: dir.to_path_buf(),
                found: v.len(),
                needed: MIN_RUNS,
            });
        }
    }
    compare_values(&a, &b)
}
