//! Sign-alignment relevance scoring and threshold filtering of client updates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub aligned: usize,
    pub total: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Compare `sign(w_c)` with `sign(w_g)`.
    #[default]
    WeightSign,
    /// Compare `sign(w_c - w_g)` with `sign(w_g - w_g_prev)`.
    DeltaSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub theta: f64,
    pub mode: SelectionMode,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            theta: 0.65,
            mode: SelectionMode::WeightSign,
        }
    }
}

impl SelectionPolicy {
    pub fn new(theta: f64, mode: SelectionMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::config("theta", "must lie in [0, 1]"));
        }
        Ok(SelectionPolicy { theta, mode })
    }

    /// Accept iff `ratio >= theta`.
    pub fn decide(&self, score: &RelevanceScore) -> Decision {
        if score.ratio >= self.theta {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn accepted(self) -> bool {
        matches!(self, Decision::Accept)
    }
}

/// Three sign classes; exact zero is its own class.
#[inline]
fn sign_class(x: f64) -> Ordering {
    x.partial_cmp(&0.0).unwrap_or(Ordering::Equal)
}

fn check_len(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
            context: "relevance operands",
        });
    }
    Ok(())
}

fn score(aligned: usize, total: usize) -> RelevanceScore {
    RelevanceScore {
        aligned,
        total,
        ratio: if total == 0 { 1.0 } else { aligned as f64 / total as f64 },
    }
}

pub fn calculate_relevance(
    local: &ParamVector,
    global: &ParamVector,
    global_prev: Option<&ParamVector>,
    mode: SelectionMode,
) -> Result<RelevanceScore> {
    check_len(local, global)?;
    let total = local.len();
    let aligned = match mode {
        SelectionMode::WeightSign => local
            .values
            .iter()
            .zip(&global.values)
            .filter(|(c, g)| sign_class(**c) == sign_class(**g))
            .count(),
        SelectionMode::DeltaSign => {
            let prev = global_prev.ok_or(Error::MissingPreviousGlobal)?;
            check_len(global, prev)?;
            local
                .values
                .iter()
                .zip(&global.values)
                .zip(&prev.values)
                .filter(|((c, g), p)| sign_class(*c - *g) == sign_class(*g - *p))
                .count()
        }
    };
    Ok(score(aligned, total))
}

/// Score `local` against the global model and apply the threshold.
pub fn filter_update(
    local: &ParamVector,
    global: &ParamVector,
    global_prev: Option<&ParamVector>,
    policy: &SelectionPolicy,
) -> Result<(Decision, RelevanceScore)> {
    let score = calculate_relevance(local, global, global_prev, policy.mode)?;
    Ok((policy.decide(&score), score))
}

/// One row of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub theta: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub comm_time_s: f64,
    pub accepted_frac: f64,
}

/// The grid used for the sensitivity table.
pub const DEFAULT_THETAS: [f64; 5] = [0.50, 0.60, 0.65, 0.70, 0.75];

/// Run one experiment per theta. `run_fn` must use the same seeds for every
/// theta so rows differ only by the threshold.
pub fn sweep_threshold<F>(thetas: &[f64], mut run_fn: F) -> Result<Vec<ThresholdRow>>
where
    F: FnMut(f64) -> Result<ThresholdRow>,
{
    thetas
        .iter()
        .map(|&theta| {
            if !(0.0..=1.0).contains(&theta) {
                return Err(Error::config("thetas", format!("{theta} outside [0, 1]")));
            }
            run_fn(theta)
        })
        .collect()
}

pub fn threshold_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("theta,accuracy,auc,comm_time_s,accepted_frac\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.theta, r.accuracy, r.auc, r.comm_time_s, r.accepted_frac
        ));
    }
    out
}
