//! Global model state, FedAvg aggregation, the synchronous barrier round and
//! the buffered asynchronous event loop.

use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{self, ClientProfile, CycleOutcome, RecoverySpec, TimeLaw, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault::{self, Checkpoint, CheckpointScope, DropoutSchedule, OptimizerState, Progress};
use crate::metrics::{self, EvalResult, RoundReport};
use crate::model::{Mode, ModelSpec, ParamVector};
use crate::seed::{self, Stream};
use crate::selection::{self, RelevanceScore, SelectionPolicy};
use crate::simnet::{self, kind, CommReport, EventKind, EventLog, EventQueue, LogRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationRecord {
    pub round: u64,
    pub accepted_ids: Vec<usize>,
    pub aggregate_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// Number of aggregations applied so far.
    pub round: u64,
    pub w_g: ParamVector,
    pub w_g_prev: Option<ParamVector>,
    pub history: Vec<AggregationRecord>,
}

impl GlobalState {
    pub fn new(w0: ParamVector) -> Self {
        GlobalState {
            round: 0,
            w_g: w0,
            w_g_prev: None,
            history: Vec::new(),
        }
    }

    fn apply(&mut self, w: ParamVector, accepted_ids: Vec<usize>, t_s: f64) -> Result<()> {
        if !w.is_finite() {
            return Err(Error::NonFinite("aggregated global model".into()));
        }
        self.w_g_prev = Some(std::mem::replace(&mut self.w_g, w));
        self.round += 1;
        self.history.push(AggregationRecord {
            round: self.round,
            accepted_ids,
            aggregate_time_s: t_s,
        });
        Ok(())
    }
}

/// Elementwise mean. `None` for an empty list (global model retained).
///
/// Each coordinate is summed in sorted order, so the result is bitwise
/// independent of the order of `updates`.
pub fn aggregate(updates: &[&ParamVector]) -> Result<Option<ParamVector>> {
    let weighted: Vec<(&ParamVector, f64)> = updates.iter().map(|&u| (u, 1.0)).collect();
    aggregate_weighted(&weighted)
}

/// Weighted mean `sum(w_i x_i) / sum(w_i)`.
pub fn aggregate_weighted(updates: &[(&ParamVector, f64)]) -> Result<Option<ParamVector>> {
    let Some((first, _)) = updates.first() else {
        return Ok(None);
    };
    if let Some((bad, _)) = updates.iter().find(|(u, _)| u.len() != first.len()) {
        return Err(Error::DimensionMismatch {
            expected: first.len(),
            actual: bad.len(),
            context: "aggregated update",
        });
    }
    if updates.iter().any(|(_, w)| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Data("aggregation weights must be positive".into()));
    }
    let total_w: f64 = {
        let mut ws: Vec<f64> = updates.iter().map(|(_, w)| *w).collect();
        ws.sort_by(f64::total_cmp);
        ws.iter().sum()
    };
    if updates.len() == 1 {
        return Ok(Some((*first).clone()));
    }
    let mut out = ParamVector {
        values: vec![0.0; first.len()],
        spec_digest: first.spec_digest,
    };
    let mut column = Vec::with_capacity(updates.len());
    for (j, o) in out.values.iter_mut().enumerate() {
        // unanimous coordinates are returned as-is: sum-then-divide can round
        let v0 = first.values[j];
        if updates.iter().all(|(u, _)| u.values[j].to_bits() == v0.to_bits()) {
            *o = v0;
            continue;
        }
        column.clear();
        column.extend(updates.iter().map(|(u, w)| u.values[j] * w));
        column.sort_by(f64::total_cmp);
        *o = column.iter().sum::<f64>() / total_w;
    }
    Ok(Some(out))
}

/// Accepted updates awaiting an asynchronous flush.
#[derive(Debug, Clone)]
pub struct AsyncBuffer {
    pub pending: Vec<PendingUpdate>,
    pub k_min: usize,
    pub timeout_s: f64,
}

#[derive(Debug, Clone)]
pub struct PendingUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub num_samples: usize,
    /// Global version the client trained from.
    pub base_version: u64,
}

impl AsyncBuffer {
    pub fn new(k_min: usize, timeout_s: f64) -> Result<Self> {
        if k_min == 0 {
            return Err(Error::config("k_min", "must be >= 1"));
        }
        if !(timeout_s > 0.0) {
            return Err(Error::config("timeout_s", "must be > 0"));
        }
        Ok(AsyncBuffer {
            pending: Vec::new(),
            k_min,
            timeout_s,
        })
    }

    pub fn is_full(&self) -> bool {
        self.pending.len() >= self.k_min
    }
}

/// One participant: profile, local shard and batch size.
#[derive(Debug, Clone)]
pub struct FedClient {
    pub profile: ClientProfile,
    pub shard: Dataset,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoverySettings {
    pub recovery_s: f64,
    /// Checkpoint-interval search grid as a fraction of the training time.
    pub grid_frac: f64,
    /// Resume from client checkpoints; otherwise failed work is lost.
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub epochs: u32,
    pub base_lr: f64,
    pub decay: f64,
    pub policy: SelectionPolicy,
    /// `false` accepts every update (the FedAvg baseline).
    pub filter: bool,
    pub k_min: usize,
    pub timeout_s: f64,
    /// Server compute per aggregated update, simulated seconds.
    pub agg_cost_s: f64,
    pub weighted: bool,
    pub step_overhead_s: f64,
    pub recovery: RecoverySettings,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: GlobalState,
    pub reports: Vec<RoundReport>,
    pub log: EventLog,
    pub comm: CommReport,
    /// Staleness of every applied update, in application order.
    pub staleness: Vec<u64>,
    pub sgd_steps: u64,
    pub final_eval: Option<EvalResult>,
    /// Latest global checkpoint blob, if checkpointing is enabled.
    pub global_checkpoint: Option<Vec<u8>>,
}

pub fn evaluate(model: &ModelSpec, test: &Dataset, params: &ParamVector) -> Result<EvalResult> {
    let scores = model.predict(params, test.features.view(), Mode::Eval)?;
    metrics::evaluate(&scores, &test.labels, 0.5)
}

/// Per-window counters turned into a [`RoundReport`].
#[derive(Default)]
struct Window {
    start_s: f64,
    updates: u64,
    trained: u64,
    accepted: u64,
    rejected: u64,
    failed: u64,
    sgd_steps: u64,
    staleness: Vec<u64>,
}

impl Window {
    fn close(&mut self, round: u64, t_s: f64, eval: &EvalResult) -> RoundReport {
        let st = metrics::staleness_stats(&self.staleness);
        let r = RoundReport {
            round,
            t_s,
            round_time_s: t_s - self.start_s,
            comm_time_s: t_s,
            accuracy: eval.accuracy,
            auc: eval.auc,
            updates: self.updates,
            trained: self.trained,
            accepted: self.accepted,
            rejected: self.rejected,
            failed: self.failed,
            accepted_frac: if self.trained == 0 {
                0.0
            } else {
                self.accepted as f64 / self.trained as f64
            },
            sgd_steps: self.sgd_steps,
            staleness_mean: st.mean,
            staleness_max: st.max,
        };
        *self = Window {
            start_s: t_s,
            ..Default::default()
        };
        r
    }
}

/// A federation wired for simulation.
pub struct Federation<'a> {
    pub model: &'a ModelSpec,
    pub clients: &'a [FedClient],
    pub test: &'a Dataset,
    pub params: SimParams,
}

struct Snapshot {
    w: Arc<ParamVector>,
    prev: Option<Arc<ParamVector>>,
    version: u64,
    lr_round: u32,
}

impl<'a> Federation<'a> {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::config("num_clients", "need at least one client"));
        }
        for c in self.clients {
            c.profile.validate()?;
            if c.shard.is_empty() {
                return Err(Error::Data(format!("client {} has an empty shard", c.profile.id)));
            }
        }
        let p = &self.params;
        if !(p.agg_cost_s >= 0.0) {
            return Err(Error::config("aggregation.a_s", "must be >= 0"));
        }
        if !(p.recovery.recovery_s >= 0.0) {
            return Err(Error::config("checkpoint.t_r_s", "must be >= 0"));
        }
        if !(p.recovery.grid_frac > 0.0 && p.recovery.grid_frac <= 1.0) {
            return Err(Error::config("checkpoint.grid_frac", "must lie in (0, 1]"));
        }
        Ok(())
    }

    fn train_config(&self, client: usize, index: u64, lr_round: u32) -> TrainConfig {
        TrainConfig {
            epochs: self.params.epochs,
            batch_size: self.clients[client].batch_size,
            base_lr: self.params.base_lr,
            decay: self.params.decay,
            lr_round,
            seed: seed::derive_stream(self.params.seed, Stream::Train, &[client as u64, index]),
        }
    }

    fn law(&self, client: usize) -> TimeLaw {
        TimeLaw {
            speed: self.clients[client].profile.speed,
            step_overhead_s: self.params.step_overhead_s,
        }
    }

    /// Failure offset into training for `(client, index)`, if it fails.
    fn fail_at(&self, client: usize, index: u64, planned_s: f64) -> Option<f64> {
        let prof = &self.clients[client].profile;
        if prof.dropout_rate <= 0.0 {
            return None;
        }
        let sched = DropoutSchedule {
            rate: prof.dropout_rate,
            seed: self.params.seed,
        };
        if !sched.fails(client, index) {
            return None;
        }
        let u = sched.fail_point(client, index);
        Some(match &prof.weibull {
            Some(w) => w.sample_truncated(u, planned_s),
            None => u * planned_s,
        })
    }

    fn recovery_spec(&self, client: usize, planned_s: f64) -> Option<RecoverySpec> {
        let r = self.params.recovery;
        if !r.enabled {
            return None;
        }
        let grid = planned_s * r.grid_frac;
        let interval_s = match (&self.clients[client].profile.weibull, grid > 0.0) {
            (Some(w), true) => fault::optimal_interval(planned_s, r.recovery_s, w, grid),
            _ => grid,
        };
        Some(RecoverySpec {
            interval_s,
            recovery_s: r.recovery_s,
        })
    }

    fn cycle(
        &self,
        client: usize,
        index: u64,
        round: u64,
        snap_w: &ParamVector,
        lr_round: u32,
    ) -> Result<CycleOutcome> {
        let cfg = self.train_config(client, index, lr_round);
        let law = self.law(client);
        let shard = &self.clients[client].shard;
        let planned = client::planned_time(shard.len(), &cfg, law);
        client::run_cycle(
            self.model,
            shard,
            snap_w,
            cfg,
            law,
            client,
            round,
            self.fail_at(client, index, planned),
            self.recovery_spec(client, planned),
        )
    }

    /// Relevance filter as evaluated on the client against its snapshot.
    fn decide(
        &self,
        local: &ParamVector,
        w: &ParamVector,
        prev: Option<&ParamVector>,
    ) -> Result<(bool, Option<RelevanceScore>)> {
        let score = match selection::calculate_relevance(local, w, prev, self.params.policy.mode) {
            Ok(s) => Some(s),
            Err(Error::MissingPreviousGlobal) => None,
            Err(e) => return Err(e),
        };
        let accepted = match (&score, self.params.filter) {
            (_, false) | (None, true) => true,
            (Some(s), true) => self.params.policy.decide(s).accepted(),
        };
        Ok((accepted, score))
    }

    fn merge(&self, items: &[(&ParamVector, usize)]) -> Result<Option<ParamVector>> {
        if self.params.weighted {
            let w: Vec<_> = items.iter().map(|(p, n)| (*p, *n as f64)).collect();
            aggregate_weighted(&w)
        } else {
            let v: Vec<_> = items.iter().map(|(p, _)| *p).collect();
            aggregate(&v)
        }
    }

    fn global_checkpoint(&self, state: &GlobalState) -> Vec<u8> {
        fault::save_checkpoint(&Checkpoint {
            scope: CheckpointScope::Global,
            round: state.round,
            params: state.w_g.clone(),
            optimizer: OptimizerState {
                base_lr: self.params.base_lr,
                decay: self.params.decay,
                lr_round: state.round.min(u64::from(u32::MAX)) as u32,
                seed: self.params.seed,
            },
            progress: Progress::default(),
        })
    }

    /// Synchronous FedAvg: `rounds` barrier rounds over all clients.
    pub fn run_sync(&self, rounds: u64) -> Result<RunResult> {
        self.validate()?;
        let mut state = GlobalState::new(self.model.init_params(seed::derive_stream(
            self.params.seed,
            Stream::Init,
            &[],
        )));
        let mut log = EventLog::default();
        let mut reports = Vec::new();
        let mut staleness = Vec::new();
        let mut sgd_steps = 0;
        let mut ckpt_blob = None;
        let mut queue = EventQueue::new();
        let mut window = Window::default();
        let n = self.clients.len();

        for r in 0..rounds {
            let t0 = queue.now();
            let lr_round = r.min(u64::from(u32::MAX)) as u32;
            let w = &state.w_g;
            let run = |c: usize| self.cycle(c, r, r, w, lr_round);
            #[cfg(feature = "parallel")]
            let outcomes: Vec<Result<CycleOutcome>> = (0..n).into_par_iter().map(run).collect();
            #[cfg(not(feature = "parallel"))]
            let outcomes: Vec<Result<CycleOutcome>> = (0..n).map(run).collect();

            // Ready time per surviving client and its accepted update.
            let mut accepted: Vec<(usize, &ParamVector, usize)> = Vec::new();
            let mut ready = Vec::new();
            let mut fail_times = Vec::new();
            let mut records: Vec<LogRecord> = Vec::new();
            let outcomes: Vec<CycleOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
            for (c, out) in outcomes.iter().enumerate() {
                let prof = &self.clients[c].profile;
                let t_b = t0 + prof.down_latency_s;
                records.push(LogRecord::new(t_b, kind::BROADCAST_ARRIVE, r).client(c));
                match out {
                    CycleOutcome::Lost { fail_at_s, .. } => {
                        records.push(LogRecord::new(t_b + fail_at_s, kind::CLIENT_FAIL, r).client(c));
                        fail_times.push(t_b + fail_at_s);
                        window.failed += 1;
                    }
                    CycleOutcome::Completed {
                        update,
                        elapsed_s,
                        failure,
                    } => {
                        if let Some(f) = failure {
                            records.push(LogRecord::new(t_b + f.fail_at_s, kind::CLIENT_FAIL, r).client(c));
                            records.push(
                                LogRecord::new(t_b + f.fail_at_s + f.recovery_s, kind::CLIENT_RECOVER, r).client(c),
                            );
                            window.failed += 1;
                        }
                        let t_done = t_b + elapsed_s;
                        let (ok, score) = self.decide(&update.params, &state.w_g, state.w_g_prev.as_ref())?;
                        let mut rec = LogRecord::new(t_done, kind::TRAIN_DONE, r).client(c);
                        rec.accepted = Some(ok);
                        rec.relevance = score.map(|s| s.ratio);
                        records.push(rec);
                        window.trained += 1;
                        window.sgd_steps += update.sgd_steps;
                        sgd_steps += update.sgd_steps;
                        if ok {
                            let t_up = t_done + prof.up_latency_s;
                            records.push(LogRecord::new(t_up, kind::UPLOAD_ARRIVE, r).client(c));
                            ready.push(t_up);
                            accepted.push((c, &update.params, update.num_samples));
                            window.accepted += 1;
                        } else {
                            ready.push(t_done);
                            window.rejected += 1;
                        }
                    }
                }
            }
            // the server learns of a lost client at its failure time
            let barrier = ready.iter().chain(&fail_times).copied().fold(t0, f64::max);
            // order by time through the event queue; insertion order breaks ties
            for (i, rec) in records.iter().enumerate() {
                queue.schedule(rec.t_s, EventKind::Checkpoint, None, i as u64)?;
            }
            while let Some(ev) = queue.pop() {
                log.push(records[ev.tag as usize].clone());
            }
            log.push(LogRecord::new(barrier, kind::BARRIER, r));

            let duration = self.params.agg_cost_s * accepted.len() as f64;
            let t_end = barrier + duration;
            let items: Vec<(&ParamVector, usize)> = accepted.iter().map(|(_, p, n)| (*p, *n)).collect();
            let ids: Vec<usize> = accepted.iter().map(|(c, _, _)| *c).collect();
            let merged = self.merge(&items)?;
            if let Some(w_new) = merged {
                for _ in &ids {
                    staleness.push(0);
                    window.staleness.push(0);
                }
                state.apply(w_new, ids.clone(), t_end)?;
                let mut rec = LogRecord::new(t_end, kind::AGGREGATE, state.round);
                rec.count = Some(ids.len());
                rec.duration_s = Some(duration);
                log.push(rec);
                window.updates += 1;
                if self.params.recovery.enabled {
                    ckpt_blob = Some(self.global_checkpoint(&state));
                    log.push(LogRecord::new(t_end, kind::CHECKPOINT, state.round));
                }
            }
            queue.schedule(t_end, EventKind::Checkpoint, None, 0)?;
            queue.pop();
            log.push(LogRecord::new(t_end, kind::ROUND_END, r));
            let eval = evaluate(self.model, self.test, &state.w_g)?;
            reports.push(window.close(r, t_end, &eval));
        }

        let comm = simnet::comm_time_report(&log, n);
        let final_eval = if rounds > 0 {
            Some(evaluate(self.model, self.test, &state.w_g)?)
        } else {
            None
        };
        Ok(RunResult {
            state,
            reports,
            log,
            comm,
            staleness,
            sgd_steps,
            final_eval,
            global_checkpoint: ckpt_blob,
        })
    }

    /// Asynchronous buffered aggregation with a budget of `rounds * C`
    /// completed work slots (delivered updates, rejected trainings and lost
    /// cycles).
    ///
    /// Clients fetch, train, filter and upload independently. The server
    /// flushes its buffer once it holds `k_min` updates or `timeout_s` after
    /// the first pending update arrived; a flush takes `a_s * |S|` simulated
    /// seconds and sets `w_g` to the mean of the flushed updates. When the
    /// budget is spent, training and uploads still in flight are cancelled,
    /// the buffer is drained, and the run ends at the last aggregation.
    pub fn run_async(&self, rounds: u64) -> Result<RunResult> {
        self.validate()?;
        AsyncLoop::new(self)?.run(rounds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Waiting on broadcast or training for cycle `tag`.
    Busy,
    /// Lost cycle; re-fetches after recovery.
    Recovering,
    /// Accepted update in transit to the server.
    Uploading,
    /// Update buffered; re-fetches when it is applied.
    Waiting,
    Stopped,
}

struct ClientRt {
    cycle: u64,
    phase: Phase,
    snapshot: Option<Snapshot>,
    outcome: Option<CycleOutcome>,
}

struct AsyncLoop<'f, 'a> {
    fed: &'f Federation<'a>,
    queue: EventQueue,
    log: EventLog,
    clients: Vec<ClientRt>,
    cur: Arc<ParamVector>,
    prev: Option<Arc<ParamVector>>,
    state: GlobalState,
    buffer: AsyncBuffer,
    buffer_gen: u64,
    timeout_expired: bool,
    flushing: Option<Vec<PendingUpdate>>,
    uploads_in_flight: usize,
    slots_done: u64,
    budget: u64,
    stopping: bool,
    window: Window,
    reports: Vec<RoundReport>,
    staleness: Vec<u64>,
    sgd_steps: u64,
    ckpt_blob: Option<Vec<u8>>,
    end_s: f64,
}

impl<'f, 'a> AsyncLoop<'f, 'a> {
    fn new(fed: &'f Federation<'a>) -> Result<Self> {
        let w0 = fed
            .model
            .init_params(seed::derive_stream(fed.params.seed, Stream::Init, &[]));
        Ok(AsyncLoop {
            fed,
            queue: EventQueue::new(),
            log: EventLog::default(),
            clients: (0..fed.clients.len())
                .map(|_| ClientRt {
                    cycle: 0,
                    phase: Phase::Busy,
                    snapshot: None,
                    outcome: None,
                })
                .collect(),
            cur: Arc::new(w0.clone()),
            prev: None,
            state: GlobalState::new(w0),
            buffer: AsyncBuffer::new(fed.params.k_min, fed.params.timeout_s)?,
            buffer_gen: 0,
            timeout_expired: false,
            flushing: None,
            uploads_in_flight: 0,
            slots_done: 0,
            budget: 0,
            stopping: false,
            window: Window::default(),
            reports: Vec::new(),
            staleness: Vec::new(),
            sgd_steps: 0,
            ckpt_blob: None,
            end_s: 0.0,
        })
    }

    fn n(&self) -> u64 {
        self.clients.len() as u64
    }

    fn lr_round(&self, rounds: u64) -> u32 {
        (self.slots_done / self.n())
            .min(rounds.saturating_sub(1))
            .min(u64::from(u32::MAX)) as u32
    }

    fn run(mut self, rounds: u64) -> Result<RunResult> {
        self.budget = rounds * self.n();
        if self.budget == 0 {
            return self.finish(rounds);
        }
        // every client starts at t=0 from w_0; train those first cycles together
        for c in 0..self.clients.len() {
            self.fetch(c, rounds)?;
        }
        let first: Vec<Result<CycleOutcome>> = {
            let fed = self.fed;
            let w = Arc::clone(&self.cur);
            let run = |c: usize| fed.cycle(c, 0, 0, &w, 0);
            #[cfg(feature = "parallel")]
            let v = (0..self.clients.len()).into_par_iter().map(run).collect();
            #[cfg(not(feature = "parallel"))]
            let v = (0..self.clients.len()).map(run).collect();
            v
        };
        for (rt, out) in self.clients.iter_mut().zip(first) {
            rt.outcome = Some(out?);
        }

        while let Some(ev) = self.queue.pop() {
            let t = ev.t_s;
            match ev.kind {
                EventKind::BroadcastArrive => self.on_broadcast(ev.client.expect("client event"), ev.tag, t, rounds)?,
                EventKind::ClientFail => self.on_fail(ev.client.expect("client event"), ev.tag, t, rounds)?,
                EventKind::ClientRecover => self.on_recover(ev.client.expect("client event"), ev.tag, t, rounds)?,
                EventKind::TrainDone => self.on_train_done(ev.client.expect("client event"), ev.tag, t, rounds)?,
                EventKind::UploadArrive => self.on_upload(ev.client.expect("client event"), ev.tag, t)?,
                EventKind::BufferTimeout => {
                    if ev.tag == self.buffer_gen && !self.buffer.pending.is_empty() {
                        self.log.push(LogRecord::new(t, kind::BUFFER_TIMEOUT, self.state.round));
                        self.timeout_expired = true;
                    }
                }
                EventKind::AggregateDone => self.on_aggregate_done(t, rounds)?,
                EventKind::Checkpoint => {}
            }
            self.try_flush(t)?;
        }
        self.finish(rounds)
    }

    fn active(&self, c: usize, tag: u64) -> bool {
        self.clients[c].phase == Phase::Busy && self.clients[c].cycle == tag
    }

    fn fetch(&mut self, c: usize, rounds: u64) -> Result<()> {
        if self.stopping {
            self.clients[c].phase = Phase::Stopped;
            return Ok(());
        }
        let snap = Snapshot {
            w: Arc::clone(&self.cur),
            prev: self.prev.clone(),
            version: self.state.round,
            lr_round: self.lr_round(rounds),
        };
        let now = self.queue.now();
        let down = self.fed.clients[c].profile.down_latency_s;
        let rt = &mut self.clients[c];
        rt.phase = Phase::Busy;
        rt.snapshot = Some(snap);
        rt.outcome = None;
        let cycle = rt.cycle;
        self.queue
            .schedule(now + down, EventKind::BroadcastArrive, Some(c), cycle)?;
        Ok(())
    }

    fn on_broadcast(&mut self, c: usize, tag: u64, t: f64, _rounds: u64) -> Result<()> {
        if !self.active(c, tag) {
            return Ok(());
        }
        let round = self.state.round;
        self.log
            .push(LogRecord::new(t, kind::BROADCAST_ARRIVE, round).client(c));
        if self.clients[c].outcome.is_none() {
            let snap = self.clients[c].snapshot.as_ref().expect("fetched");
            let out = self.fed.cycle(c, tag, snap.version, &snap.w, snap.lr_round)?;
            self.clients[c].outcome = Some(out);
        }
        match self.clients[c].outcome.as_ref().expect("computed") {
            CycleOutcome::Lost { fail_at_s, .. } => {
                self.queue
                    .schedule(t + fail_at_s, EventKind::ClientFail, Some(c), tag)?;
            }
            CycleOutcome::Completed { elapsed_s, failure, .. } => {
                if let Some(f) = failure {
                    self.queue
                        .schedule(t + f.fail_at_s, EventKind::ClientFail, Some(c), tag)?;
                    self.queue
                        .schedule(t + f.fail_at_s + f.recovery_s, EventKind::ClientRecover, Some(c), tag)?;
                }
                self.queue.schedule(t + elapsed_s, EventKind::TrainDone, Some(c), tag)?;
            }
        }
        Ok(())
    }

    fn on_fail(&mut self, c: usize, tag: u64, t: f64, _rounds: u64) -> Result<()> {
        if !self.active(c, tag) {
            return Ok(());
        }
        self.log
            .push(LogRecord::new(t, kind::CLIENT_FAIL, self.state.round).client(c));
        self.window.failed += 1;
        if matches!(self.clients[c].outcome, Some(CycleOutcome::Lost { .. })) {
            self.clients[c].phase = Phase::Recovering;
            self.queue.schedule(
                t + self.fed.params.recovery.recovery_s,
                EventKind::ClientRecover,
                Some(c),
                tag,
            )?;
            self.complete_slot(t)?;
        }
        Ok(())
    }

    fn on_recover(&mut self, c: usize, tag: u64, t: f64, rounds: u64) -> Result<()> {
        let rt = &self.clients[c];
        if rt.cycle != tag || rt.phase == Phase::Stopped {
            return Ok(());
        }
        self.log
            .push(LogRecord::new(t, kind::CLIENT_RECOVER, self.state.round).client(c));
        if rt.phase == Phase::Recovering {
            self.clients[c].cycle += 1;
            self.fetch(c, rounds)?;
        }
        Ok(())
    }

    fn on_train_done(&mut self, c: usize, tag: u64, t: f64, rounds: u64) -> Result<()> {
        if !self.active(c, tag) {
            return Ok(());
        }
        let Some(CycleOutcome::Completed { update, .. }) = self.clients[c].outcome.take() else {
            unreachable!("train_done scheduled only for completed cycles");
        };
        let snap = self.clients[c].snapshot.take().expect("fetched");
        let (ok, score) = self.fed.decide(&update.params, &snap.w, snap.prev.as_deref())?;
        let mut rec = LogRecord::new(t, kind::TRAIN_DONE, self.state.round).client(c);
        rec.accepted = Some(ok);
        rec.relevance = score.map(|s| s.ratio);
        self.log.push(rec);
        self.window.trained += 1;
        self.window.sgd_steps += update.sgd_steps;
        self.sgd_steps += update.sgd_steps;
        if ok {
            self.window.accepted += 1;
            self.clients[c].phase = Phase::Uploading;
            self.clients[c].snapshot = Some(snap);
            self.clients[c].outcome = Some(CycleOutcome::Completed {
                elapsed_s: 0.0,
                failure: None,
                update,
            });
            self.uploads_in_flight += 1;
            let up = self.fed.clients[c].profile.up_latency_s;
            self.queue.schedule(t + up, EventKind::UploadArrive, Some(c), tag)?;
        } else {
            self.window.rejected += 1;
            self.clients[c].cycle += 1;
            self.complete_slot(t)?;
            self.fetch(c, rounds)?;
        }
        Ok(())
    }

    fn on_upload(&mut self, c: usize, tag: u64, t: f64) -> Result<()> {
        if self.clients[c].phase != Phase::Uploading || self.clients[c].cycle != tag {
            return Ok(());
        }
        self.uploads_in_flight -= 1;
        let rt = &mut self.clients[c];
        rt.phase = Phase::Waiting;
        let Some(CycleOutcome::Completed { update, .. }) = rt.outcome.take() else {
            unreachable!("upload follows an accepted update");
        };
        let base_version = rt.snapshot.take().expect("snapshot kept for upload").version;
        self.log
            .push(LogRecord::new(t, kind::UPLOAD_ARRIVE, self.state.round).client(c));
        if self.buffer.pending.is_empty() {
            self.queue.schedule(
                t + self.buffer.timeout_s,
                EventKind::BufferTimeout,
                None,
                self.buffer_gen,
            )?;
        }
        self.buffer.pending.push(PendingUpdate {
            client_id: c,
            params: update.params,
            num_samples: update.num_samples,
            base_version,
        });
        self.complete_slot(t)
    }

    fn try_flush(&mut self, t: f64) -> Result<()> {
        if self.flushing.is_some() || self.buffer.pending.is_empty() {
            return Ok(());
        }
        let draining = self.stopping && self.uploads_in_flight == 0;
        if !(self.buffer.is_full() || self.timeout_expired || draining) {
            return Ok(());
        }
        let batch = std::mem::take(&mut self.buffer.pending);
        self.buffer_gen += 1;
        self.timeout_expired = false;
        let duration = self.fed.params.agg_cost_s * batch.len() as f64;
        self.queue
            .schedule(t + duration, EventKind::AggregateDone, None, batch.len() as u64)?;
        self.flushing = Some(batch);
        Ok(())
    }

    fn on_aggregate_done(&mut self, t: f64, rounds: u64) -> Result<()> {
        let batch = self.flushing.take().expect("aggregation in progress");
        let items: Vec<(&ParamVector, usize)> = batch.iter().map(|u| (&u.params, u.num_samples)).collect();
        let merged = self.fed.merge(&items)?.expect("flushes are non-empty");
        let version_before = self.state.round;
        let ids: Vec<usize> = batch.iter().map(|u| u.client_id).collect();
        self.state.apply(merged, ids.clone(), t)?;
        self.prev = Some(std::mem::replace(&mut self.cur, Arc::new(self.state.w_g.clone())));

        let duration = self.fed.params.agg_cost_s * batch.len() as f64;
        let mut rec = LogRecord::new(t, kind::AGGREGATE, self.state.round);
        rec.count = Some(batch.len());
        rec.duration_s = Some(duration);
        self.log.push(rec);
        for u in &batch {
            let s = version_before - u.base_version;
            self.staleness.push(s);
            self.window.staleness.push(s);
            let mut rec = LogRecord::new(t, kind::APPLIED, self.state.round).client(u.client_id);
            rec.staleness = Some(s);
            self.log.push(rec);
        }
        self.window.updates += 1;
        self.end_s = t;
        if self.fed.params.recovery.enabled {
            self.ckpt_blob = Some(self.fed.global_checkpoint(&self.state));
            self.log.push(LogRecord::new(t, kind::CHECKPOINT, self.state.round));
        }
        for c in ids {
            self.clients[c].cycle += 1;
            self.fetch(c, rounds)?;
        }
        Ok(())
    }

    /// Count a finished work slot; close report windows and stop at budget.
    fn complete_slot(&mut self, t: f64) -> Result<()> {
        self.slots_done += 1;
        self.end_s = self.end_s.max(t);
        if self.slots_done >= self.budget {
            if !self.stopping {
                self.stopping = true;
                for c in 0..self.clients.len() {
                    match self.clients[c].phase {
                        Phase::Busy | Phase::Uploading => {
                            if self.clients[c].phase == Phase::Uploading {
                                self.uploads_in_flight -= 1;
                            }
                            self.log
                                .push(LogRecord::new(t, kind::CANCELLED, self.state.round).client(c));
                            self.clients[c].phase = Phase::Stopped;
                        }
                        Phase::Recovering => self.clients[c].phase = Phase::Stopped,
                        Phase::Waiting | Phase::Stopped => {}
                    }
                }
            }
        } else if self.slots_done.is_multiple_of(self.n()) {
            let r = self.slots_done / self.n() - 1;
            self.log.push(LogRecord::new(t, kind::ROUND_END, r));
            let eval = evaluate(self.fed.model, self.fed.test, &self.state.w_g)?;
            self.reports.push(self.window.close(r, t, &eval));
        }
        Ok(())
    }

    fn finish(mut self, rounds: u64) -> Result<RunResult> {
        let final_eval = if rounds > 0 {
            let r = rounds - 1;
            let t = self.end_s;
            self.log.push(LogRecord::new(t, kind::ROUND_END, r));
            let eval = evaluate(self.fed.model, self.fed.test, &self.state.w_g)?;
            self.reports.push(self.window.close(r, t, &eval));
            Some(eval)
        } else {
            None
        };
        let comm = simnet::comm_time_report(&self.log, self.clients.len());
        Ok(RunResult {
            state: self.state,
            reports: self.reports,
            log: self.log,
            comm,
            staleness: self.staleness,
            sgd_steps: self.sgd_steps,
            final_eval,
            global_checkpoint: self.ckpt_blob,
        })
    }
}
