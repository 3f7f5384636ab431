//! Simulated client runtime: capacity-proportional batch sizing, batch-by-batch
//! local SGD with checkpointable progress, and the simulated-time law.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault::{self, Checkpoint, CheckpointScope, OptimizerState, Progress, WeibullModel};
use crate::model::{self, ModelSpec, ParamVector};
use crate::seed::{self, Stream};
use crate::selection::RelevanceScore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    /// Samples processed per simulated second.
    pub speed: f64,
    pub up_latency_s: f64,
    pub down_latency_s: f64,
    /// Abstract resource index; 1.0 is the reference client.
    pub capacity: f64,
    pub dropout_rate: f64,
    pub weibull: Option<WeibullModel>,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("client[{}].{name}", self.id);
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::config(field("speed"), "must be positive and finite"));
        }
        for (name, v) in [
            ("up_latency_s", self.up_latency_s),
            ("down_latency_s", self.down_latency_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field(name), "must be finite and >= 0"));
            }
        }
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err(Error::config(field("capacity"), "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::config(field("dropout_rate"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Nearest power of two (in log scale) to `b_ref * capacity / cap_ref`,
/// clamped to `[b_min, b_max]`.
pub fn assign_batch_size(profile: &ClientProfile, b_ref: usize, cap_ref: f64, b_min: usize, b_max: usize) -> usize {
    let target = b_ref as f64 * profile.capacity / cap_ref;
    let pow = if target > 0.0 && target.is_finite() {
        let exp = target.log2().round().clamp(0.0, 62.0);
        1usize << exp as u32
    } else if target > 0.0 {
        b_max
    } else {
        b_min
    };
    pow.clamp(b_min, b_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay: f64,
    /// Round index fed to the learning-rate schedule.
    pub lr_round: u32,
    /// Keys the shuffle and dropout streams.
    pub seed: u64,
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        model::lr_schedule(self.lr_round, self.base_lr, self.decay)
    }

    fn optimizer(&self) -> OptimizerState {
        OptimizerState {
            base_lr: self.base_lr,
            decay: self.decay,
            lr_round: self.lr_round,
            seed: self.seed,
        }
    }
}

/// `train_time = epochs * n / speed + steps * step_overhead_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeLaw {
    pub speed: f64,
    #[serde(default)]
    pub step_overhead_s: f64,
}

impl TimeLaw {
    pub fn new(speed: f64) -> Self {
        TimeLaw {
            speed,
            step_overhead_s: 0.0,
        }
    }

    pub fn time(&self, samples: u64, steps: u64) -> f64 {
        samples as f64 / self.speed + steps as f64 * self.step_overhead_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: u64,
    pub params: ParamVector,
    pub num_samples: usize,
    pub train_time_s: f64,
    pub sgd_steps: u64,
    pub relevance: Option<RelevanceScore>,
}

/// Local SGD over one client's shard, advanced one mini-batch at a time.
///
/// Epoch `e` visits rows in a permutation drawn from `(seed, e)`; batch `j`
/// of epoch `e` draws its dropout mask from `(seed, e, j)`. Position and
/// parameters fully determine the rest of the run, which is what makes
/// checkpoint/resume exact.
pub struct LocalTrainer<'a> {
    model: &'a ModelSpec,
    shard: &'a Dataset,
    cfg: TrainConfig,
    params: ParamVector,
    progress: Progress,
    order: Vec<usize>,
    order_epoch: Option<u32>,
    steps: u64,
}

fn shuffle_seed(seed: u64, epoch: u32) -> u64 {
    seed::derive_stream(seed, Stream::Train, &[0, u64::from(epoch)])
}

fn dropout_seed(seed: u64, epoch: u32, batch: u32) -> u64 {
    seed::derive_stream(seed, Stream::Train, &[1, u64::from(epoch), u64::from(batch)])
}

impl<'a> LocalTrainer<'a> {
    pub fn new(model: &'a ModelSpec, shard: &'a Dataset, start: ParamVector, cfg: TrainConfig) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Data("client shard is empty".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if start.len() != model.param_count() {
            return Err(Error::DimensionMismatch {
                expected: model.param_count(),
                actual: start.len(),
                context: "trainer start parameters",
            });
        }
        Ok(LocalTrainer {
            model,
            shard,
            cfg,
            params: start,
            progress: Progress::default(),
            order: Vec::new(),
            order_epoch: None,
            steps: 0,
        })
    }

    /// Resume from a checkpoint taken by [`LocalTrainer::snapshot`].
    pub fn from_checkpoint(
        model: &'a ModelSpec,
        shard: &'a Dataset,
        ckpt: &Checkpoint,
        epochs: u32,
        batch_size: usize,
    ) -> Result<Self> {
        let o = ckpt.optimizer;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            base_lr: o.base_lr,
            decay: o.decay,
            lr_round: o.lr_round,
            seed: o.seed,
        };
        let mut t = LocalTrainer::new(model, shard, ckpt.params.clone(), cfg)?;
        if ckpt.progress.batch as usize >= t.batches_per_epoch() || ckpt.progress.epoch > epochs {
            return Err(Error::CorruptCheckpoint("progress outside the training plan".into()));
        }
        t.progress = ckpt.progress;
        t.steps = t.position();
        Ok(t)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.shard.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        u64::from(self.cfg.epochs) * self.batches_per_epoch() as u64
    }

    /// Steps completed, counted from the start of the plan.
    pub fn position(&self) -> u64 {
        u64::from(self.progress.epoch) * self.batches_per_epoch() as u64 + u64::from(self.progress.batch)
    }

    pub fn is_done(&self) -> bool {
        self.progress.epoch >= self.cfg.epochs
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    /// Samples consumed after `steps` steps of the plan.
    pub fn samples_after(&self, steps: u64) -> u64 {
        let n = self.shard.len() as u64;
        let bpe = self.batches_per_epoch() as u64;
        let b = self.cfg.batch_size as u64;
        (steps / bpe) * n + ((steps % bpe) * b).min(n)
    }

    /// Rows of the next batch, reshuffling at epoch boundaries.
    pub fn next_rows(&mut self) -> &[usize] {
        let epoch = self.progress.epoch;
        if self.order_epoch != Some(epoch) {
            self.order = (0..self.shard.len()).collect();
            self.order.shuffle(&mut seed::rng(shuffle_seed(self.cfg.seed, epoch)));
            self.order_epoch = Some(epoch);
        }
        let b = self.cfg.batch_size;
        let start = self.progress.batch as usize * b;
        let end = (start + b).min(self.order.len());
        &self.order[start..end]
    }

    /// Run one mini-batch. Returns `false` once the plan is complete.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let Progress { epoch, batch } = self.progress;
        let rows = self.next_rows().to_vec();
        let data = self.shard.batch(&rows)?;
        let (_, grad) =
            self.model
                .loss_and_grad(&self.params, &data, Some(dropout_seed(self.cfg.seed, epoch, batch)))?;
        model::sgd_step_in_place(&mut self.params, &grad, self.cfg.lr())?;
        self.steps += 1;
        self.progress.batch += 1;
        if self.progress.batch as usize >= self.batches_per_epoch() {
            self.progress = Progress {
                epoch: epoch + 1,
                batch: 0,
            };
        }
        Ok(!self.is_done())
    }

    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if !self.step()? {
                break;
            }
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    pub fn snapshot(&self, scope: CheckpointScope, round: u64) -> Checkpoint {
        Checkpoint {
            scope,
            round,
            params: self.params.clone(),
            optimizer: self.cfg.optimizer(),
            progress: self.progress,
        }
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }
}

/// Train `epochs` over the shard and package the result with its simulated time.
pub fn train_local(
    model: &ModelSpec,
    shard: &Dataset,
    start: &ParamVector,
    cfg: TrainConfig,
    law: TimeLaw,
    client_id: usize,
    round: u64,
) -> Result<ClientUpdate> {
    let mut t = LocalTrainer::new(model, shard, start.clone(), cfg)?;
    t.run_to_end()?;
    let steps = t.total_steps();
    let samples = u64::from(cfg.epochs) * shard.len() as u64;
    Ok(ClientUpdate {
        client_id,
        round,
        params: t.into_params(),
        num_samples: shard.len(),
        train_time_s: law.time(samples, steps),
        sgd_steps: steps,
        relevance: None,
    })
}

/// Recovery behaviour when a client fails mid-training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoverySpec {
    /// Simulated seconds between client checkpoints.
    pub interval_s: f64,
    pub recovery_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovered {
    /// Offset from training start at which the client failed.
    pub fail_at_s: f64,
    /// Training time already banked in the restored checkpoint.
    pub resume_from_s: f64,
    pub recovery_s: f64,
    /// Whether the checkpoint blob restored cleanly (otherwise restarted).
    pub restored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CycleOutcome {
    Completed {
        update: ClientUpdate,
        /// Wall of simulated time from training start to completion,
        /// including lost work and recovery.
        elapsed_s: f64,
        failure: Option<Recovered>,
    },
    /// Work discarded: failure without checkpointing, or a non-finite loss.
    Lost { fail_at_s: f64, diverged: bool },
}

impl CycleOutcome {
    pub fn update(&self) -> Option<&ClientUpdate> {
        match self {
            CycleOutcome::Completed { update, .. } => Some(update),
            CycleOutcome::Lost { .. } => None,
        }
    }
}

/// Nominal training duration for a shard under `cfg`, before any faults.
pub fn planned_time(shard_len: usize, cfg: &TrainConfig, law: TimeLaw) -> f64 {
    let steps = u64::from(cfg.epochs) * shard_len.div_ceil(cfg.batch_size.max(1)) as u64;
    law.time(u64::from(cfg.epochs) * shard_len as u64, steps)
}

/// One local-training cycle with an optional failure `fail_at_s` seconds in.
///
/// With `recovery`, the client resumes from the last checkpoint it wrote at
/// or before the failure (state saved every `interval_s`, aligned down to a
/// batch boundary) after `recovery_s`; the checkpoint goes through the binary
/// blob format so resume is exercised end to end. Without `recovery`, the
/// cycle's work is lost.
#[allow(clippy::too_many_arguments)]
pub fn run_cycle(
    model: &ModelSpec,
    shard: &Dataset,
    start: &ParamVector,
    cfg: TrainConfig,
    law: TimeLaw,
    client_id: usize,
    round: u64,
    fail_at_s: Option<f64>,
    recovery: Option<RecoverySpec>,
) -> Result<CycleOutcome> {
    let mut trainer = LocalTrainer::new(model, shard, start.clone(), cfg)?;
    let total_steps = trainer.total_steps();
    let time_at = |t: &LocalTrainer, steps: u64| law.time(t.samples_after(steps), steps);
    let train_time = time_at(&trainer, total_steps);

    let diverged = |steps_done: u64, t: &LocalTrainer| CycleOutcome::Lost {
        fail_at_s: time_at(t, steps_done),
        diverged: true,
    };

    let failure = match (fail_at_s, recovery) {
        (None, _) => None,
        (Some(t_f), None) => {
            return Ok(CycleOutcome::Lost {
                fail_at_s: t_f.min(train_time),
                diverged: false,
            })
        }
        (Some(t_f), Some(rec)) => {
            let t_f = t_f.min(train_time);
            let limit = if rec.interval_s > 0.0 {
                (t_f / rec.interval_s).floor() * rec.interval_s
            } else {
                t_f
            };
            // last batch boundary at or before the most recent checkpoint tick
            let mut k = 0;
            while k < total_steps && time_at(&trainer, k + 1) <= limit {
                k += 1;
            }
            if let Err(e) = trainer.run_steps(k) {
                return match e {
                    Error::NonFinite(_) => Ok(diverged(trainer.position(), &trainer)),
                    e => Err(e),
                };
            }
            let blob = fault::save_checkpoint(&trainer.snapshot(CheckpointScope::Client(client_id), round));
            let (resumed, restored) = match fault::restore_checkpoint(&blob)
                .and_then(|ckpt| LocalTrainer::from_checkpoint(model, shard, &ckpt, cfg.epochs, cfg.batch_size))
            {
                Ok(t) => (t, true),
                // degraded path: start over from the broadcast global model
                Err(_) => (LocalTrainer::new(model, shard, start.clone(), cfg)?, false),
            };
            let resume_from_s = if restored { time_at(&resumed, k) } else { 0.0 };
            trainer = resumed;
            Some(Recovered {
                fail_at_s: t_f,
                resume_from_s,
                recovery_s: rec.recovery_s,
                restored,
            })
        }
    };

    if let Err(e) = trainer.run_to_end() {
        return match e {
            Error::NonFinite(_) => Ok(diverged(trainer.position(), &trainer)),
            e => Err(e),
        };
    }
    let elapsed_s = match &failure {
        Some(f) => train_time + (f.fail_at_s - f.resume_from_s) + f.recovery_s,
        None => train_time,
    };
    Ok(CycleOutcome::Completed {
        update: ClientUpdate {
            client_id,
            round,
            params: trainer.into_params(),
            num_samples: shard.len(),
            train_time_s: train_time,
            sgd_steps: total_steps,
            relevance: None,
        },
        elapsed_s,
        failure,
    })
}
