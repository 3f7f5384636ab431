//! Experiment configuration: JSON with defaults, field-level validation and a
//! canonical printed form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CsvOptions;
use crate::error::{Error, Result};
use crate::fault::WeibullModel;
use crate::selection::{SelectionMode, SelectionPolicy};
use crate::simnet::{Distribution, LatencyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Synchronous FedAvg, every update accepted.
    SyncBaseline,
    SyncFiltered,
    AsyncFiltered,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::SyncBaseline => "sync_baseline",
            RunMode::SyncFiltered => "sync_filtered",
            RunMode::AsyncFiltered => "async_filtered",
        }
    }

    pub fn is_async(self) -> bool {
        self == RunMode::AsyncFiltered
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync_baseline" => Ok(RunMode::SyncBaseline),
            "sync_filtered" => Ok(RunMode::SyncFiltered),
            "async_filtered" => Ok(RunMode::AsyncFiltered),
            _ => Err(Error::config("mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        n: usize,
        d: usize,
        anomaly_frac: f64,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        options: CsvOptions,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n: 10_000,
            d: 20,
            anomaly_frac: 0.1,
            separation: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchPolicy {
    Fixed {
        size: usize,
    },
    /// Capacity-proportional power of two around `b_ref`.
    Dynamic {
        b_ref: usize,
        b_min: usize,
        b_max: usize,
    },
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy::Fixed { size: 64 }
    }
}

impl BatchPolicy {
    pub fn label(&self) -> String {
        match self {
            BatchPolicy::Fixed { size } => size.to_string(),
            BatchPolicy::Dynamic { b_ref, .. } => format!("dynamic{b_ref}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Dirichlet concentration; large values approach IID.
    pub alpha: f64,
    pub coverage: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            alpha: 1.0,
            coverage: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![256, 128, 64],
            dropout_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsConfig {
    /// Samples per simulated second, drawn once per client.
    pub speed: Distribution,
    /// Per-client link latency, drawn once per client and direction.
    pub latency: LatencyModel,
    pub dropout_rate: f64,
    pub weibull: Option<WeibullModel>,
    /// Extra simulated seconds per SGD step.
    pub step_overhead_s: f64,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        ClientsConfig {
            speed: Distribution::Constant { value: 1000.0 },
            latency: LatencyModel::default(),
            dropout_rate: 0.0,
            weibull: None,
            step_overhead_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub enabled: bool,
    /// Recovery (restart) time after a failure.
    pub t_r_s: f64,
    /// Interval search grid as a fraction of the client's training time.
    pub grid_frac: f64,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig {
            enabled: false,
            t_r_s: 5.0,
            grid_frac: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub k_min: usize,
    pub timeout_s: f64,
    /// Server cost per aggregated update.
    pub a_s: f64,
    /// Weight updates by sample count instead of the plain mean.
    pub weighted: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            k_min: 2,
            timeout_s: 5.0,
            a_s: 0.05,
            weighted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub test_frac: f64,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub num_clients: usize,
    pub rounds: u64,
    pub epochs: u32,
    pub batch: BatchPolicy,
    pub mode: RunMode,
    pub selection: SelectionPolicy,
    pub clients: ClientsConfig,
    pub checkpoint: CheckpointConfig,
    pub aggregation: AggregationConfig,
    pub lr: f64,
    pub lr_decay: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            data: DataSource::default(),
            test_frac: 0.2,
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            num_clients: 10,
            rounds: 6,
            epochs: 5,
            batch: BatchPolicy::default(),
            mode: RunMode::AsyncFiltered,
            selection: SelectionPolicy::default(),
            clients: ClientsConfig::default(),
            checkpoint: CheckpointConfig::default(),
            aggregation: AggregationConfig::default(),
            lr: 0.05,
            lr_decay: 1.0,
        }
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

fn pow2(v: usize) -> bool {
    v.is_power_of_two()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every field present, in declaration order.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synthetic {
                n,
                d,
                anomaly_frac,
                separation,
            } => {
                check(*n >= 4, "data.n", "must be >= 4")?;
                check(*d >= 1, "data.d", "must be >= 1")?;
                check(
                    *anomaly_frac > 0.0 && *anomaly_frac < 1.0,
                    "data.anomaly_frac",
                    "must lie in (0, 1)",
                )?;
                check(separation.is_finite(), "data.separation", "must be finite")?;
            }
            DataSource::Csv { options, .. } => {
                check(!options.label_column.is_empty(), "data.label_column", "must be set")?;
            }
        }
        check(
            self.test_frac > 0.0 && self.test_frac < 1.0,
            "test_frac",
            "must lie in (0, 1)",
        )?;
        check(
            self.partition.alpha > 0.0 && self.partition.alpha.is_finite(),
            "partition.alpha",
            "must be positive and finite",
        )?;
        check(
            self.partition.coverage > 0.0 && self.partition.coverage <= 1.0,
            "partition.coverage",
            "must lie in (0, 1]",
        )?;
        check(
            self.model.hidden_dims.iter().all(|&h| h > 0),
            "model.hidden_dims",
            "layer widths must be >= 1",
        )?;
        check(
            (0.0..1.0).contains(&self.model.dropout_rate),
            "model.dropout_rate",
            "must lie in [0, 1)",
        )?;
        check(self.num_clients >= 1, "num_clients", "must be >= 1")?;
        match self.batch {
            BatchPolicy::Fixed { size } => check(size >= 1, "batch.size", "must be >= 1")?,
            BatchPolicy::Dynamic { b_ref, b_min, b_max } => {
                check(
                    pow2(b_ref) && pow2(b_min) && pow2(b_max),
                    "batch",
                    "b_ref, b_min, b_max must be powers of two",
                )?;
                check(
                    b_min <= b_ref && b_ref <= b_max,
                    "batch",
                    "need b_min <= b_ref <= b_max",
                )?;
            }
        }
        SelectionPolicy::new(self.selection.theta, self.selection.mode).map(|_| ())?;
        self.clients.speed.validate("clients.speed")?;
        check(
            match &self.clients.speed {
                Distribution::Constant { value } => *value > 0.0,
                Distribution::Empirical { values } => values.iter().all(|v| *v > 0.0),
                Distribution::Lognormal { .. } => true,
            },
            "clients.speed",
            "speeds must be > 0",
        )?;
        self.clients.latency.validate()?;
        check(
            (0.0..=1.0).contains(&self.clients.dropout_rate),
            "clients.dropout_rate",
            "must lie in [0, 1]",
        )?;
        if let Some(w) = self.clients.weibull {
            WeibullModel::new(w.lambda_s, w.k)?;
        }
        check(
            self.clients.step_overhead_s >= 0.0 && self.clients.step_overhead_s.is_finite(),
            "clients.step_overhead_s",
            "must be finite and >= 0",
        )?;
        check(
            self.checkpoint.t_r_s >= 0.0 && self.checkpoint.t_r_s.is_finite(),
            "checkpoint.t_r_s",
            "must be finite and >= 0",
        )?;
        check(
            self.checkpoint.grid_frac > 0.0 && self.checkpoint.grid_frac <= 1.0,
            "checkpoint.grid_frac",
            "must lie in (0, 1]",
        )?;
        check(self.aggregation.k_min >= 1, "aggregation.k_min", "must be >= 1")?;
        check(
            self.aggregation.timeout_s > 0.0 && self.aggregation.timeout_s.is_finite(),
            "aggregation.timeout_s",
            "must be > 0",
        )?;
        check(
            self.aggregation.a_s >= 0.0 && self.aggregation.a_s.is_finite(),
            "aggregation.a_s",
            "must be finite and >= 0",
        )?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be > 0")?;
        check(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0,
            "lr_decay",
            "must lie in (0, 1]",
        )?;
        Ok(())
    }

    /// Selection policy actually applied (the baseline accepts everything).
    pub fn effective_policy(&self) -> SelectionPolicy {
        match self.mode {
            RunMode::SyncBaseline => SelectionPolicy {
                theta: 0.0,
                mode: SelectionMode::WeightSign,
            },
            _ => self.selection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Clients,
    Batch,
    Theta,
    Dropout,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clients" => Ok(SweepAxis::Clients),
            "batch" => Ok(SweepAxis::Batch),
            "theta" => Ok(SweepAxis::Theta),
            "dropout" => Ok(SweepAxis::Dropout),
            _ => Err(Error::config("axis", format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub repeats: u32,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        check(!self.values.is_empty(), "values", "need at least one value")?;
        check(self.repeats >= 1, "repeats", "must be >= 1")?;
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::Clients => v >= 1.0 && v.fract() == 0.0,
                SweepAxis::Batch => v >= 1.0 && v.fract() == 0.0,
                SweepAxis::Theta | SweepAxis::Dropout => (0.0..=1.0).contains(&v),
            };
            check(ok, "values", &format!("{v} is not legal on this axis"))?;
        }
        Ok(())
    }

    /// Copy of `base` with the axis set to `value`.
    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self.axis {
            SweepAxis::Clients => cfg.num_clients = value as usize,
            SweepAxis::Batch => cfg.batch = BatchPolicy::Fixed { size: value as usize },
            SweepAxis::Theta => cfg.selection.theta = value,
            SweepAxis::Dropout => cfg.clients.dropout_rate = value,
        }
        cfg
    }
}
