//! Wiring from an [`ExperimentConfig`] to a finished run and its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{self, ClientProfile};
use crate::config::{BatchPolicy, DataSource, ExperimentConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::fault::{self, CheckpointStore};
use crate::metrics::{self, StalenessStats, Summary};
use crate::model::{ModelSpec, ParamVector};
use crate::seed::{self, Stream};
use crate::server::{FedClient, Federation, RecoverySettings, RunResult, SimParams};
use crate::simnet::{self, kind, CommReport};

/// Everything needed to simulate, derived deterministically from the config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: ModelSpec,
    pub clients: Vec<FedClient>,
    pub test: Dataset,
    pub params: SimParams,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic {
            n,
            d,
            anomaly_frac,
            separation,
        } => data::synth_anomaly(*n, *d, *anomaly_frac, *separation, cfg.seed),
        DataSource::Csv { path, options } => Ok(data::load_csv(path, options)?.0),
    }
}

/// Per-client speed, latencies and capacity. Capacity is speed relative to
/// the median client, so the median client trains at `b_ref`.
pub fn build_profiles(cfg: &ExperimentConfig) -> Vec<ClientProfile> {
    let profile_seed = seed::derive_stream(cfg.seed, Stream::Profile, &[]);
    let speeds: Vec<f64> = (0..cfg.num_clients)
        .map(|i| cfg.clients.speed.sample(profile_seed, &[i as u64]))
        .collect();
    let median = median(&speeds);
    speeds
        .iter()
        .enumerate()
        .map(|(i, &speed)| {
            let (up, down) = cfg.clients.latency.sample(cfg.seed, i, 0);
            ClientProfile {
                id: i,
                speed,
                up_latency_s: up,
                down_latency_s: down,
                capacity: if median > 0.0 { speed / median } else { 1.0 },
                dropout_rate: cfg.clients.dropout_rate,
                weibull: cfg.clients.weibull,
            }
        })
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let s = metrics::sorted(v);
    match s.len() {
        0 => 0.0,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let full = load_dataset(cfg)?;
    let (train, test) = data::split_stratified(&full, cfg.test_frac, cfg.seed)?;
    let partition = data::partition_dirichlet_with_coverage(
        &train.labels,
        cfg.num_clients,
        cfg.partition.alpha,
        cfg.partition.coverage,
        cfg.seed,
    )?;
    let model = ModelSpec::new(train.n_features(), cfg.model.hidden_dims.clone())?.with_dropout(cfg.model.dropout_rate);
    model.validate()?;
    let clients = build_profiles(cfg)
        .into_iter()
        .zip(&partition.assignments)
        .map(|(profile, rows)| {
            let batch_size = match cfg.batch {
                BatchPolicy::Fixed { size } => size,
                BatchPolicy::Dynamic { b_ref, b_min, b_max } => {
                    client::assign_batch_size(&profile, b_ref, 1.0, b_min, b_max)
                }
            };
            FedClient {
                profile,
                shard: train.subset(rows),
                batch_size,
            }
        })
        .collect();
    let params = SimParams {
        epochs: cfg.epochs,
        base_lr: cfg.lr,
        decay: cfg.lr_decay,
        policy: cfg.effective_policy(),
        filter: cfg.mode != crate::config::RunMode::SyncBaseline,
        k_min: cfg.aggregation.k_min,
        timeout_s: cfg.aggregation.timeout_s,
        agg_cost_s: cfg.aggregation.a_s,
        weighted: cfg.aggregation.weighted,
        step_overhead_s: cfg.clients.step_overhead_s,
        recovery: RecoverySettings {
            recovery_s: cfg.checkpoint.t_r_s,
            grid_frac: cfg.checkpoint.grid_frac,
            enabled: cfg.checkpoint.enabled,
        },
        seed: cfg.seed,
    };
    Ok(Prepared {
        model,
        clients,
        test,
        params,
    })
}

impl Prepared {
    pub fn federation(&self) -> Federation<'_> {
        Federation {
            model: &self.model,
            clients: &self.clients,
            test: &self.test,
            params: self.params.clone(),
        }
    }

    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunResult> {
        let fed = self.federation();
        if cfg.mode.is_async() {
            fed.run_async(cfg.rounds)
        } else {
            fed.run_sync(cfg.rounds)
        }
    }
}

/// Prepare and simulate without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunResult> {
    prepare(cfg)?.run(cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digests {
    pub events: String,
    pub reports: String,
    pub params: String,
}

pub fn params_digest(p: &ParamVector) -> String {
    let bytes: Vec<u8> = p.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    simnet::digest_hex(&bytes)
}

pub fn digests(result: &RunResult) -> Digests {
    let reports: String = result
        .reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("reports serialize") + "\n")
        .collect();
    Digests {
        events: result.log.digest(),
        reports: simnet::digest_hex(reports.as_bytes()),
        params: params_digest(&result.state.w_g),
    }
}

pub fn summarize(cfg: &ExperimentConfig, result: &RunResult) -> Summary {
    let trained = result.log.count(kind::TRAIN_DONE) as u64;
    let accepted = result
        .log
        .records
        .iter()
        .filter(|r| r.kind == kind::TRAIN_DONE && r.accepted == Some(true))
        .count() as u64;
    let st = metrics::staleness_stats(&result.staleness);
    let eval = result.final_eval;
    Summary {
        seed: cfg.seed,
        mode: cfg.mode.as_str().to_string(),
        num_clients: cfg.num_clients,
        rounds: cfg.rounds,
        theta: cfg.effective_policy().theta,
        dropout_rate: cfg.clients.dropout_rate,
        batch: cfg.batch.label(),
        accuracy: eval.map_or(f64::NAN, |e| e.accuracy),
        auc: eval.and_then(|e| e.auc).unwrap_or(f64::NAN),
        comm_time_s: result.comm.total_comm_s,
        updates: result.log.count(kind::AGGREGATE) as u64,
        accepted_frac: if trained == 0 {
            0.0
        } else {
            accepted as f64 / trained as f64
        },
        staleness_mean: st.mean,
        staleness_max: st.max,
        sgd_steps: result.sgd_steps,
        digest: result.log.digest(),
    }
}

/// Artifact file names inside a run directory.
pub const CONFIG_FILE: &str = "config.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const DIGEST_FILE: &str = "digest.json";
pub const COMM_FILE: &str = "comm.json";
pub const ERROR_FILE: &str = "error.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Serialize)]
struct CommFile<'a> {
    #[serde(flatten)]
    comm: &'a CommReport,
    staleness: StalenessStats,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: Summary,
    pub digests: Digests,
    pub result: RunResult,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run `cfg` and write every artifact under `out`. On a runtime failure the
/// config and an `error.txt` record are left behind.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_canonical_json())?;
    match execute(cfg).and_then(|result| write_artifacts(cfg, out, result)) {
        Ok(o) => Ok(o),
        Err(e) => {
            let _ = write_file(&out.join(ERROR_FILE), &format!("{e}\n"));
            Err(e)
        }
    }
}

fn write_artifacts(cfg: &ExperimentConfig, out: &Path, result: RunResult) -> Result<RunOutput> {
    write_file(&out.join(EVENTS_FILE), &result.log.to_jsonl())?;
    let summary = summarize(cfg, &result);
    let summary_row = (!result.reports.is_empty()).then_some(&summary);
    metrics::write_reports(out, &result.reports, summary_row)?;
    let comm = CommFile {
        comm: &result.comm,
        staleness: metrics::staleness_stats(&result.staleness),
    };
    write_file(
        &out.join(COMM_FILE),
        &(serde_json::to_string_pretty(&comm).expect("comm report serializes") + "\n"),
    )?;
    let digests = digests(&result);
    write_file(
        &out.join(DIGEST_FILE),
        &(serde_json::to_string_pretty(&digests).expect("digests serialize") + "\n"),
    )?;
    let store = CheckpointStore::open(out.join(CHECKPOINT_DIR))?;
    let final_ckpt = match &result.global_checkpoint {
        Some(blob) => fault::restore_checkpoint(blob)?,
        None => fault::Checkpoint {
            scope: fault::CheckpointScope::Global,
            round: result.state.round,
            params: result.state.w_g.clone(),
            optimizer: fault::OptimizerState {
                base_lr: cfg.lr,
                decay: cfg.lr_decay,
                lr_round: result.state.round.min(u64::from(u32::MAX)) as u32,
                seed: cfg.seed,
            },
            progress: fault::Progress::default(),
        },
    };
    store.write(&final_ckpt, 0)?;
    Ok(RunOutput {
        dir: out.to_path_buf(),
        summary,
        digests,
        result,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayCheck {
    pub recorded: Digests,
    pub replayed: Digests,
}

impl ReplayCheck {
    pub fn matches(&self) -> bool {
        self.recorded == self.replayed
    }
}

/// Re-run the config stored in `dir` and compare digests with the recorded ones.
pub fn replay(dir: &Path) -> Result<ReplayCheck> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let path = dir.join(DIGEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let recorded: Digests = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
    let replayed = digests(&execute(&cfg)?);
    Ok(ReplayCheck { recorded, replayed })
}
