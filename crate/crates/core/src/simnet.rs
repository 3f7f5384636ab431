//! Discrete-event kernel: simulated clock, event queue, latency sampling,
//! the JSONL event log and communication-time accounting.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now_s: f64,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now_s
    }

    fn advance(&mut self, t_s: f64) {
        debug_assert!(t_s >= self.now_s);
        self.now_s = t_s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    BroadcastArrive,
    TrainDone,
    UploadArrive,
    BufferTimeout,
    ClientFail,
    ClientRecover,
    Checkpoint,
    /// Server finished an aggregation started earlier.
    AggregateDone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub t_s: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub client: Option<usize>,
    /// Handler-defined payload (buffer generation, cycle number, ...).
    pub tag: u64,
}

// Min-heap adaptor: earliest (t_s, seq) first.
struct Queued(SimEvent);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .t_s
            .total_cmp(&self.0.t_s)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Priority queue of simulation events ordered by `(t_s, seq)`.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    clock: SimClock,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, t_s: f64, kind: EventKind, client: Option<usize>, tag: u64) -> Result<u64> {
        if !t_s.is_finite() {
            return Err(Error::NonFinite(format!("event time {t_s}")));
        }
        if t_s < self.clock.now() {
            return Err(Error::EventInPast {
                t_s,
                now_s: self.clock.now(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued(SimEvent {
            t_s,
            seq,
            kind,
            client,
            tag,
        }));
        Ok(seq)
    }

    /// Pop the next event and advance the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent> {
        let ev = self.heap.pop()?.0;
        self.clock.advance(ev.t_s);
        Some(ev)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|q| q.0.t_s)
    }

    /// Process events with `t_s <= horizon_s`; the clock ends at the horizon
    /// when the queue drains early.
    pub fn run_until<F>(&mut self, horizon_s: f64, mut handler: F) -> Result<Vec<SimEvent>>
    where
        F: FnMut(&mut EventQueue, &SimEvent) -> Result<()>,
    {
        let mut processed = Vec::new();
        while self.peek_time().is_some_and(|t| t <= horizon_s) {
            let ev = self.pop().expect("peeked");
            handler(self, &ev)?;
            processed.push(ev);
        }
        if horizon_s > self.clock.now() {
            self.clock.advance(horizon_s);
        }
        Ok(processed)
    }
}

/// Non-negative scalar distribution used for latencies and compute speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Constant {
        value: f64,
    },
    /// `exp(N(mu, sigma^2))`.
    Lognormal {
        mu: f64,
        sigma: f64,
    },
    /// Uniform pick from a fixed list.
    Empirical {
        values: Vec<f64>,
    },
}

impl Distribution {
    pub fn validate(&self, field: &str) -> Result<()> {
        let ok = match self {
            Distribution::Constant { value } => value.is_finite() && *value >= 0.0,
            Distribution::Lognormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && *sigma >= 0.0,
            Distribution::Empirical { values } => {
                !values.is_empty() && values.iter().all(|v| v.is_finite() && *v >= 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(field, "distribution parameters out of range"))
        }
    }

    /// Deterministic draw keyed by `(seed, index)`.
    pub fn sample(&self, seed: u64, index: &[u64]) -> f64 {
        let mut rng = seed::rng(seed::derive(seed, index));
        match self {
            Distribution::Constant { value } => *value,
            Distribution::Lognormal { mu, sigma } => LogNormal::new(*mu, *sigma).expect("validated").sample(&mut rng),
            Distribution::Empirical { values } => values[rng.random_range(0..values.len())],
        }
    }
}

/// Per-direction link latency law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub up: Distribution,
    pub down: Distribution,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            up: Distribution::Constant { value: 1.0 },
            down: Distribution::Constant { value: 1.0 },
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        self.up.validate("latency.up")?;
        self.down.validate("latency.down")
    }

    /// `(up, down)` for one client; `draw` indexes repeated draws.
    pub fn sample(&self, master: u64, client: usize, draw: u64) -> (f64, f64) {
        let c = client as u64;
        (
            self.up
                .sample(seed::derive_stream(master, Stream::LatencyUp, &[]), &[c, draw]),
            self.down
                .sample(seed::derive_stream(master, Stream::LatencyDown, &[]), &[c, draw]),
        )
    }
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t_s: f64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<usize>,
    pub round: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

impl LogRecord {
    pub fn new(t_s: f64, kind: &str, round: u64) -> Self {
        LogRecord {
            t_s,
            kind: kind.to_string(),
            client_id: None,
            round,
            accepted: None,
            relevance: None,
            staleness: None,
            count: None,
            duration_s: None,
        }
    }

    pub fn client(mut self, id: usize) -> Self {
        self.client_id = Some(id);
        self
    }
}

/// Record kinds written to the log.
pub mod kind {
    pub const BROADCAST_ARRIVE: &str = "broadcast_arrive";
    pub const TRAIN_DONE: &str = "train_done";
    pub const UPLOAD_ARRIVE: &str = "upload_arrive";
    pub const BUFFER_TIMEOUT: &str = "buffer_timeout";
    pub const CLIENT_FAIL: &str = "client_fail";
    pub const CLIENT_RECOVER: &str = "client_recover";
    pub const CHECKPOINT: &str = "checkpoint";
    pub const BARRIER: &str = "barrier";
    pub const AGGREGATE: &str = "aggregate";
    pub const ROUND_END: &str = "round_end";
    pub const CANCELLED: &str = "cancelled";
    /// One per update folded into an aggregate; carries its staleness.
    pub const APPLIED: &str = "applied";
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, rec: LogRecord) {
        self.records.push(rec);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad log line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(EventLog { records })
    }

    pub fn digest(&self) -> String {
        digest_hex(self.to_jsonl().as_bytes())
    }

    pub fn count(&self, kind: &str) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }
}

/// First 64 bits of SHA-256, as 16 hex digits.
pub fn digest_hex(bytes: &[u8]) -> String {
    let full = Sha256::digest(bytes);
    full[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub total_comm_s: f64,
    pub per_round_s: Vec<f64>,
    pub updates_per_round: Vec<u64>,
    pub idle_s: Vec<f64>,
}

impl CommReport {
    /// Mean aggregation events per window of `window_s` simulated seconds.
    pub fn updates_per_window(&self, window_s: f64) -> f64 {
        if self.total_comm_s <= 0.0 {
            return 0.0;
        }
        let total: u64 = self.updates_per_round.iter().sum();
        total as f64 * window_s / self.total_comm_s
    }
}

/// Derive timing totals from a log.
///
/// Round windows are delimited by `round_end` records. Idle time is the wait
/// at each `barrier` between a client's own ready time (upload arrival, or
/// train completion when nothing was sent) and the barrier.
pub fn comm_time_report(log: &EventLog, num_clients: usize) -> CommReport {
    let mut report = CommReport {
        idle_s: vec![0.0; num_clients],
        ..Default::default()
    };
    let mut window_start = 0.0;
    let mut aggregations = 0u64;
    let mut ready: Vec<Option<f64>> = vec![None; num_clients];

    for r in &log.records {
        match r.kind.as_str() {
            kind::AGGREGATE => aggregations += 1,
            kind::TRAIN_DONE | kind::UPLOAD_ARRIVE => {
                if let Some(c) = r.client_id.filter(|&c| c < num_clients) {
                    ready[c] = Some(r.t_s);
                }
            }
            kind::CLIENT_FAIL => {
                if let Some(c) = r.client_id.filter(|&c| c < num_clients) {
                    ready[c] = None;
                }
            }
            kind::BARRIER => {
                for (c, slot) in ready.iter_mut().enumerate() {
                    if let Some(t) = slot.take() {
                        report.idle_s[c] += r.t_s - t;
                    }
                }
            }
            kind::ROUND_END => {
                report.per_round_s.push(r.t_s - window_start);
                report.updates_per_round.push(aggregations);
                aggregations = 0;
                window_start = r.t_s;
                report.total_comm_s = r.t_s;
            }
            _ => {}
        }
    }
    report
}
