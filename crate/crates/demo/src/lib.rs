//! Browser-side operations. Every export takes plain numbers/strings and
//! returns a JSON document for the page to draw.

use fedsim::config::{ExperimentConfig, RunMode, SweepAxis, SweepSpec};
use fedsim::fault::{checkpoint_cost, optimal_interval, weibull_cdf, WeibullModel};
use fedsim::{experiment, sweep};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CALIBRATION: &str = include_str!("../../../configs/calib-fig3.json");
const THRESHOLD: &str = include_str!("../../../configs/threshold-sweep.json");

#[derive(Debug, Serialize)]
pub struct CostCurve {
    pub interval_s: Vec<f64>,
    pub cost: Vec<f64>,
    pub failure_prob: Vec<f64>,
    pub optimal_s: f64,
    pub optimal_cost: f64,
}

/// Checkpoint cost over a grid of intervals in `(0, total_s]`, plus the
/// interval the simulator would pick.
pub fn cost_curve(lambda_s: f64, k: f64, total_s: f64, recovery_s: f64, points: usize) -> Result<CostCurve, String> {
    let model = WeibullModel::new(lambda_s, k).map_err(|e| e.to_string())?;
    if !(total_s > 0.0 && total_s.is_finite()) || recovery_s < 0.0 || points < 2 {
        return Err("need total > 0, recovery >= 0 and at least two points".into());
    }
    let step = total_s / points as f64;
    let interval_s: Vec<f64> = (1..=points).map(|i| step * i as f64).collect();
    let cost = interval_s
        .iter()
        .map(|&t| checkpoint_cost(t, total_s, recovery_s, &model))
        .collect();
    let failure_prob = interval_s.iter().map(|&t| weibull_cdf(t, &model)).collect();
    let optimal_s = optimal_interval(total_s, recovery_s, &model, step);
    Ok(CostCurve {
        interval_s,
        cost,
        failure_prob,
        optimal_s,
        optimal_cost: checkpoint_cost(optimal_s, total_s, recovery_s, &model),
    })
}

#[derive(Debug, Serialize)]
pub struct ScalingPoint {
    pub clients: usize,
    pub sync_comm_s: f64,
    pub async_comm_s: f64,
    pub async_aggregations: u64,
    /// Async aggregations per synchronous round's worth of simulated time.
    pub async_per_sync_round: f64,
}

/// Sync baseline vs. async under the calibration config.
pub fn scaling(clients: &[usize], seed: u64) -> Result<Vec<ScalingPoint>, String> {
    let mut base = ExperimentConfig::from_json(CALIBRATION).map_err(|e| e.to_string())?;
    base.seed = seed;
    clients
        .iter()
        .map(|&c| {
            let mut cfg = base.clone();
            cfg.num_clients = c;
            cfg.mode = RunMode::SyncBaseline;
            let sync = experiment::execute(&cfg).map_err(|e| e.to_string())?;
            cfg.mode = RunMode::AsyncFiltered;
            let asy = experiment::execute(&cfg).map_err(|e| e.to_string())?;
            let aggs: u64 = asy.comm.updates_per_round.iter().sum();
            let window = sync.comm.total_comm_s / cfg.rounds.max(1) as f64;
            Ok(ScalingPoint {
                clients: c,
                sync_comm_s: sync.comm.total_comm_s,
                async_comm_s: asy.comm.total_comm_s,
                async_aggregations: aggs,
                async_per_sync_round: aggs as f64 * window / asy.comm.total_comm_s,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct ThresholdPoint {
    pub theta: f64,
    pub comm_time_s: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub accepted_frac: f64,
}

/// One async run per theta on a synthetic set of `n` rows.
pub fn threshold_sweep(thetas: &[f64], n: usize, seed: u64) -> Result<Vec<ThresholdPoint>, String> {
    let mut base = ExperimentConfig::from_json(THRESHOLD).map_err(|e| e.to_string())?;
    base.seed = seed;
    if let fedsim::config::DataSource::Synthetic { n: rows, .. } = &mut base.data {
        *rows = n;
    }
    let spec = SweepSpec {
        axis: SweepAxis::Theta,
        values: thetas.to_vec(),
        repeats: 1,
    };
    let rows = sweep::sweep(&base, &spec, None).map_err(|e| e.to_string())?;
    rows.into_iter()
        .map(|r| {
            let s = r.summary.ok_or_else(|| r.error.unwrap_or_default())?;
            Ok(ThresholdPoint {
                theta: r.value,
                comm_time_s: s.comm_time_s,
                accuracy: s.accuracy,
                auc: s.auc,
                accepted_frac: s.accepted_frac,
            })
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad list item `{t}`")))
        .collect()
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = costCurve)]
pub fn cost_curve_js(lambda_s: f64, k: f64, total_s: f64, recovery_s: f64, points: usize) -> Result<String, JsError> {
    to_js(cost_curve(lambda_s, k, total_s, recovery_s, points))
}

/// `clients` is a comma-separated list, e.g. `"10,50,100"`.
#[wasm_bindgen(js_name = scaling)]
pub fn scaling_js(clients: &str, seed: u64) -> Result<String, JsError> {
    to_js(parse_list(clients).and_then(|c: Vec<usize>| scaling(&c, seed)))
}

/// `thetas` is a comma-separated list, e.g. `"0.5,0.6,0.7"`.
#[wasm_bindgen(js_name = thresholdSweep)]
pub fn threshold_sweep_js(thetas: &str, n: usize, seed: u64) -> Result<String, JsError> {
    to_js(parse_list(thetas).and_then(|t: Vec<f64>| threshold_sweep(&t, n, seed)))
}
