//! Failure modeling, dropout injection, checkpoint-interval selection, and
//! checkpoint persistence.
//!
//! Checkpoint blobs use a small versioned container; see
//! `docs/checkpoint-format.md` for the byte layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel {
    pub lambda_s: f64,
    pub k: f64,
}

impl WeibullModel {
    pub fn new(lambda_s: f64, k: f64) -> Result<Self> {
        if !(lambda_s > 0.0) {
            return Err(Error::config("weibull.lambda_s", "must be > 0"));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::config("weibull.k", "must be > 0"));
        }
        Ok(WeibullModel { lambda_s, k })
    }

    /// `F(t) = 1 - exp(-(t / lambda)^k)`.
    pub fn cdf(&self, t_s: f64) -> f64 {
        weibull_cdf(t_s, self)
    }

    /// Inverse-CDF draw conditioned on failing before `t_max`; `u` in [0, 1).
    pub fn sample_truncated(&self, u: f64, t_max: f64) -> f64 {
        let p_max = self.cdf(t_max);
        if p_max <= 0.0 {
            return u * t_max;
        }
        let t = self.lambda_s * (-(-u * p_max).ln_1p()).powf(1.0 / self.k);
        t.min(t_max)
    }
}

pub fn weibull_cdf(t_s: f64, model: &WeibullModel) -> f64 {
    if t_s <= 0.0 {
        return 0.0;
    }
    -(-(t_s / model.lambda_s).powf(model.k)).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPolicy {
    pub t_c_s: f64,
    pub total_s: f64,
    pub recovery_s: f64,
}

/// `C(t_c) = t_c / T + F(t_c) * t_r / T`.
pub fn checkpoint_cost(t_c_s: f64, total_s: f64, recovery_s: f64, model: &WeibullModel) -> f64 {
    t_c_s / total_s + weibull_cdf(t_c_s, model) * recovery_s / total_s
}

/// Grid argmin of [`checkpoint_cost`] over `{grid, 2 grid, ..., <= T}`;
/// ties resolve to the smallest interval.
pub fn optimal_interval(total_s: f64, recovery_s: f64, model: &WeibullModel, grid_s: f64) -> f64 {
    assert!(grid_s > 0.0, "grid resolution must be positive");
    let steps = (total_s / grid_s + 1e-9).floor() as u64;
    if steps == 0 {
        return total_s;
    }
    let mut best = (f64::INFINITY, grid_s);
    for i in 1..=steps {
        let t = grid_s * i as f64;
        let c = checkpoint_cost(t, total_s, recovery_s, model);
        if c < best.0 {
            best = (c, t);
        }
    }
    best.1
}

impl CheckpointPolicy {
    /// Policy with `t_c` chosen by [`optimal_interval`] at `grid = T * grid_frac`.
    pub fn optimized(total_s: f64, recovery_s: f64, model: &WeibullModel, grid_frac: f64) -> Self {
        let t_c_s = optimal_interval(total_s, recovery_s, model, total_s * grid_frac);
        CheckpointPolicy {
            t_c_s,
            total_s,
            recovery_s,
        }
    }

    pub fn cost(&self, model: &WeibullModel) -> f64 {
        checkpoint_cost(self.t_c_s, self.total_s, self.recovery_s, model)
    }
}

/// Independent per-(client, round) Bernoulli failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSchedule {
    pub rate: f64,
    pub seed: u64,
}

impl DropoutSchedule {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1]"));
        }
        Ok(DropoutSchedule { rate, seed })
    }

    pub fn fails(&self, client: usize, round: u64) -> bool {
        let u: f64 = seed::stream_rng(self.seed, Stream::Dropout, &[client as u64, round]).random();
        u < self.rate
    }

    /// Uniform draw in [0, 1) used to place a failure inside a training run.
    pub fn fail_point(&self, client: usize, round: u64) -> f64 {
        seed::stream_rng(self.seed, Stream::FailPoint, &[client as u64, round]).random()
    }
}

/// Materialized failure matrix, indexed `[round][client]`.
pub fn inject_dropout(num_clients: usize, rounds: u64, rate: f64, seed: u64) -> Result<Vec<Vec<bool>>> {
    let schedule = DropoutSchedule::new(rate, seed)?;
    Ok((0..rounds)
        .map(|r| (0..num_clients).map(|c| schedule.fails(c, r)).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointScope {
    Global,
    Client(usize),
}

impl CheckpointScope {
    pub fn label(&self) -> String {
        match self {
            CheckpointScope::Global => "global".into(),
            CheckpointScope::Client(id) => format!("client{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub decay: f64,
    pub lr_round: u32,
    /// Seed that keys the shuffle and dropout streams of the run.
    pub seed: u64,
}

/// Position of the next batch to run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: u32,
    pub batch: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub scope: CheckpointScope,
    pub round: u64,
    pub params: ParamVector,
    pub optimizer: OptimizerState,
    pub progress: Progress,
}

const MAGIC: &[u8; 4] = b"FSCK";
const FORMAT_VERSION: u16 = 1;
const TAG_META: u8 = 1;
const TAG_OPTIMIZER: u8 = 2;
const TAG_PROGRESS: u8 = 3;
const TAG_PARAMS: u8 = 4;

fn digest8(bytes: &[u8]) -> [u8; 8] {
    let full = Sha256::digest(bytes);
    full[..8].try_into().expect("sha256 is 32 bytes")
}

fn section(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + ckpt.params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());

    let mut meta = Vec::with_capacity(17);
    match ckpt.scope {
        CheckpointScope::Global => {
            meta.push(0);
            meta.extend_from_slice(&0u64.to_le_bytes());
        }
        CheckpointScope::Client(id) => {
            meta.push(1);
            meta.extend_from_slice(&(id as u64).to_le_bytes());
        }
    }
    meta.extend_from_slice(&ckpt.round.to_le_bytes());
    section(&mut out, TAG_META, &meta);

    let o = &ckpt.optimizer;
    let mut opt = Vec::with_capacity(28);
    opt.extend_from_slice(&o.base_lr.to_bits().to_le_bytes());
    opt.extend_from_slice(&o.decay.to_bits().to_le_bytes());
    opt.extend_from_slice(&o.lr_round.to_le_bytes());
    opt.extend_from_slice(&o.seed.to_le_bytes());
    section(&mut out, TAG_OPTIMIZER, &opt);

    let mut prog = Vec::with_capacity(8);
    prog.extend_from_slice(&ckpt.progress.epoch.to_le_bytes());
    prog.extend_from_slice(&ckpt.progress.batch.to_le_bytes());
    section(&mut out, TAG_PROGRESS, &prog);

    let mut params = Vec::with_capacity(16 + ckpt.params.len() * 8);
    params.extend_from_slice(&ckpt.params.spec_digest.to_le_bytes());
    params.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for v in &ckpt.params.values {
        params.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    section(&mut out, TAG_PARAMS, &params);

    let d = digest8(&out);
    out.extend_from_slice(&d);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

pub fn restore_checkpoint(blob: &[u8]) -> Result<Checkpoint> {
    if blob.len() < 16 {
        return Err(Error::CorruptCheckpoint("blob too short".into()));
    }
    let (body, tail) = blob.split_at(blob.len() - 8);
    if digest8(body) != tail {
        return Err(Error::CorruptCheckpoint("digest mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let sections = c.u16()?;

    let mut scope = None;
    let mut round = None;
    let mut optimizer = None;
    let mut progress = None;
    let mut params = None;
    for _ in 0..sections {
        let tag = c.u8()?;
        let len = c.u32()? as usize;
        let mut s = Cursor {
            buf: c.take(len)?,
            pos: 0,
        };
        match tag {
            TAG_META => {
                let kind = s.u8()?;
                let id = s.u64()?;
                scope = Some(match kind {
                    0 => CheckpointScope::Global,
                    1 => CheckpointScope::Client(id as usize),
                    k => return Err(Error::CorruptCheckpoint(format!("unknown scope {k}"))),
                });
                round = Some(s.u64()?);
            }
            TAG_OPTIMIZER => {
                optimizer = Some(OptimizerState {
                    base_lr: s.f64()?,
                    decay: s.f64()?,
                    lr_round: s.u32()?,
                    seed: s.u64()?,
                });
            }
            TAG_PROGRESS => {
                progress = Some(Progress {
                    epoch: s.u32()?,
                    batch: s.u32()?,
                });
            }
            TAG_PARAMS => {
                let spec_digest = s.u64()?;
                let n = s.u64()? as usize;
                if n.checked_mul(8) != Some(len - 16) {
                    return Err(Error::CorruptCheckpoint("parameter length".into()));
                }
                let values = (0..n).map(|_| s.f64()).collect::<Result<Vec<_>>>()?;
                params = Some(ParamVector { values, spec_digest });
            }
            // unknown sections are skipped for forward compatibility
            _ => {}
        }
    }
    let missing = |what: &str| Error::CorruptCheckpoint(format!("missing {what} section"));
    Ok(Checkpoint {
        scope: scope.ok_or_else(|| missing("meta"))?,
        round: round.ok_or_else(|| missing("meta"))?,
        params: params.ok_or_else(|| missing("params"))?,
        optimizer: optimizer.ok_or_else(|| missing("optimizer"))?,
        progress: progress.ok_or_else(|| missing("progress"))?,
    })
}

/// On-disk checkpoint directory with a digest manifest.
///
/// Files are named `{scope}-{round}-{seq}.ckpt`; each write goes to a
/// temporary file that is renamed into place.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    dir: PathBuf,
}

pub const MANIFEST_FILE: &str = "MANIFEST";

impl CheckpointStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CheckpointStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, ckpt: &Checkpoint, seq: u64) -> Result<PathBuf> {
        let name = format!("{}-{}-{}.ckpt", ckpt.scope.label(), ckpt.round, seq);
        let blob = save_checkpoint(ckpt);
        let path = self.dir.join(&name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, &blob).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        let digest = hex8(&blob[blob.len() - 8..]);
        let manifest = self.dir.join(MANIFEST_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest)
            .map_err(|e| Error::io(&manifest, e))?;
        writeln!(f, "{name} {digest}").map_err(|e| Error::io(&manifest, e))?;
        Ok(path)
    }

    pub fn read(&self, name: &str) -> Result<Checkpoint> {
        let path = self.dir.join(name);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        restore_checkpoint(&blob)
    }
}

fn hex8(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
