//! Accuracy, rank-based AUC-ROC, the Mann-Whitney U test, and report files.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Data("empty score vector".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: labels.len(),
            context: "scores vs labels",
        });
    }
    Ok(())
}

/// Fraction of rows where `(score >= threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Area under the empirical ROC curve, computed by counting concordant
/// positive/negative pairs with ties weighted one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // walk tie groups in ascending score order
    let mut negs_below = 0u64;
    let mut concordant = 0u64;
    let mut tied = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        concordant += pos * negs_below;
        tied += pos * neg;
        negs_below += neg;
        i = j;
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: f64,
}

pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalResult> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    Ok(EvalResult {
        accuracy: accuracy(scores, labels, threshold)?,
        auc: if n_pos > 0 && n_neg > 0 {
            Some(auc_roc(scores, labels)?)
        } else {
            None
        },
        n_pos,
        n_neg,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// Sample A tends to exceed sample B.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UTestResult {
    /// `U_a`: pairs with `a > b`, plus one half per tie.
    pub u_statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub method: UMethod,
    pub alternative: Alternative,
}

impl UTestResult {
    pub fn u_other(&self) -> f64 {
        (self.n1 * self.n2) as f64 - self.u_statistic
    }

    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Largest `n1 * n2` for which the exact null distribution is enumerated.
pub const EXACT_LIMIT: usize = 400;

/// Mann-Whitney U test with midrank tie handling.
///
/// Tie-free samples with `n1 * n2 <= 400` get an exact p-value from the
/// enumerated null distribution; everything else uses the normal
/// approximation with tie-corrected variance and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<UTestResult> {
    mann_whitney_u_with(a, b, alternative, None)
}

/// [`mann_whitney_u`] with the p-value method forced. The exact method
/// requires tie-free samples.
pub fn mann_whitney_u_with(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
    method: Option<UMethod>,
) -> Result<UTestResult> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Data("Mann-Whitney U needs non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in Mann-Whitney sample".into()));
    }
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let n = pooled.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i) as f64;
        if j - i > 1 {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        // ranks i+1..=j averaged
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum_a += midrank * pooled[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let u_a = rank_sum_a - (n1 * (n1 + 1)) as f64 / 2.0;
    let mut result = UTestResult {
        u_statistic: u_a,
        p_value: 1.0,
        n1,
        n2,
        method: UMethod::NormalApprox,
        alternative,
    };

    let exact = match method {
        Some(UMethod::Exact) if has_ties => {
            return Err(Error::Data("exact Mann-Whitney p-value needs tie-free samples".into()))
        }
        Some(m) => m == UMethod::Exact,
        None => !has_ties && n1 * n2 <= EXACT_LIMIT,
    };
    if exact {
        result.method = UMethod::Exact;
        result.p_value = exact_p(u_a.round() as usize, n1, n2, alternative);
        return Ok(result);
    }

    let nn = n as f64;
    let mean = (n1 * n2) as f64 / 2.0;
    let var = (n1 * n2) as f64 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if !(var > 0.0) {
        // every observation identical
        return Ok(result);
    }
    let sd = var.sqrt();
    let normal = Normal::standard();
    result.p_value = match alternative {
        Alternative::TwoSided => {
            let z = (((u_a - mean).abs() - 0.5) / sd).max(0.0);
            (2.0 * normal.sf(z)).min(1.0)
        }
        Alternative::Greater => {
            let z = (u_a - mean - 0.5) / sd;
            normal.sf(z)
        }
    };
    Ok(result)
}

/// Null distribution of U as arrangement counts, index = U.
fn u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    // f[i][j][u]: arrangements of i a's and j b's with U = u
    let mut f: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n2 + 1]; n1 + 1];
    for i in 0..=n1 {
        for j in 0..=n2 {
            if i == 0 || j == 0 {
                f[i][j] = vec![1.0];
                continue;
            }
            let mut cur = vec![0.0; i * j + 1];
            // largest element is an `a`: it beats all j b's
            for (u, &c) in f[i - 1][j].iter().enumerate() {
                cur[u + j] += c;
            }
            // largest element is a `b`
            for (u, &c) in f[i][j - 1].iter().enumerate() {
                cur[u] += c;
            }
            f[i][j] = cur;
        }
    }
    std::mem::take(&mut f[n1][n2])
}

fn exact_p(u: usize, n1: usize, n2: usize, alternative: Alternative) -> f64 {
    let dist = u_distribution(n1, n2);
    let total: f64 = dist.iter().sum();
    let upper: f64 = dist[u..].iter().sum::<f64>() / total;
    match alternative {
        Alternative::Greater => upper,
        Alternative::TwoSided => {
            let lower: f64 = dist[..=u].iter().sum::<f64>() / total;
            (2.0 * lower.min(upper)).min(1.0)
        }
    }
}

/// One record per round (sync) or per round-equivalent window (async).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    /// Simulated time at the end of the round.
    pub t_s: f64,
    pub round_time_s: f64,
    pub comm_time_s: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    /// Aggregation events inside the round.
    pub updates: u64,
    pub trained: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub failed: u64,
    pub accepted_frac: f64,
    pub sgd_steps: u64,
    pub staleness_mean: f64,
    pub staleness_max: u64,
}

/// Final-row summary written to `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub mode: String,
    pub num_clients: usize,
    pub rounds: u64,
    pub theta: f64,
    pub dropout_rate: f64,
    pub batch: String,
    pub accuracy: f64,
    pub auc: f64,
    pub comm_time_s: f64,
    pub updates: u64,
    pub accepted_frac: f64,
    pub staleness_mean: f64,
    pub staleness_max: u64,
    pub sgd_steps: u64,
    pub digest: String,
}

/// Column order of `summary.csv` (schema version 1).
pub const SUMMARY_COLUMNS: [&str; 16] = [
    "seed",
    "mode",
    "num_clients",
    "rounds",
    "theta",
    "dropout_rate",
    "batch",
    "accuracy",
    "auc",
    "comm_time_s",
    "updates",
    "accepted_frac",
    "staleness_mean",
    "staleness_max",
    "sgd_steps",
    "digest",
];

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn write_round_reports(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut buf = Vec::new();
    for r in reports {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_summaries(path: &Path, rows: &[Summary]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summaries(path: &Path) -> Result<Vec<Summary>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}

/// Write `rounds.jsonl` plus a `summary.csv` whose single row is `summary`
/// (header only when no round ran).
pub fn write_reports(dir: &Path, reports: &[RoundReport], summary: Option<&Summary>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_round_reports(&dir.join(ROUNDS_FILE), reports)?;
    let rows: Vec<Summary> = if reports.is_empty() {
        Vec::new()
    } else {
        summary.into_iter().cloned().collect()
    };
    write_summaries(&dir.join(SUMMARY_FILE), &rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StalenessStats {
    pub mean: f64,
    pub max: u64,
    pub histogram: BTreeMap<u64, u64>,
}

pub fn staleness_stats(values: &[u64]) -> StalenessStats {
    let mut histogram = BTreeMap::new();
    for &v in values {
        *histogram.entry(v).or_insert(0) += 1;
    }
    StalenessStats {
        mean: if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<u64>() as f64 / values.len() as f64
        },
        max: values.iter().copied().max().unwrap_or(0),
        histogram,
    }
}

/// Sort helper used by tests and the sweep collector.
pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    v
}
