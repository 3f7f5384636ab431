use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedsim::config::{BatchPolicy, DataSource, ExperimentConfig, RunMode, SweepAxis};
use fedsim::data::CsvOptions;
use fedsim::selection::SelectionMode;

#[derive(Debug, Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated-learning simulator for anomaly detection"
)]
pub struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (a file for `gen-data`).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its artifacts.
    Run(Overrides),
    /// Run one experiment per (value, repeat) and merge the summaries.
    Sweep(SweepArgs),
    /// Mann-Whitney U test on the final AUCs found under two directories.
    Compare(CompareArgs),
    /// Re-run a run directory and verify its recorded digests.
    Replay(ReplayArgs),
    /// Export the synthetic data set as CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    SyncBaseline,
    SyncFiltered,
    AsyncFiltered,
}

impl From<Mode> for RunMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::SyncBaseline => RunMode::SyncBaseline,
            Mode::SyncFiltered => RunMode::SyncFiltered,
            Mode::AsyncFiltered => RunMode::AsyncFiltered,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Selection {
    WeightSign,
    DeltaSign,
}

impl From<Selection> for SelectionMode {
    fn from(s: Selection) -> Self {
        match s {
            Selection::WeightSign => SelectionMode::WeightSign,
            Selection::DeltaSign => SelectionMode::DeltaSign,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Axis {
    Clients,
    Batch,
    Theta,
    Dropout,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Clients => SweepAxis::Clients,
            Axis::Batch => SweepAxis::Batch,
            Axis::Theta => SweepAxis::Theta,
            Axis::Dropout => SweepAxis::Dropout,
        }
    }
}

/// Config fields settable from the command line.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Fixed batch size (replaces a dynamic batch policy).
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, value_enum)]
    pub selection_mode: Option<Selection>,
    /// Per-round client dropout probability.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train on a CSV file instead of synthetic data.
    #[arg(long, value_name = "FILE", requires = "label_column")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub label_column: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m.into();
        }
        if let Some(c) = self.clients {
            cfg.num_clients = c;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(size) = self.batch_size {
            cfg.batch = BatchPolicy::Fixed { size };
        }
        if let Some(t) = self.theta {
            cfg.selection.theta = t;
        }
        if let Some(s) = self.selection_mode {
            cfg.selection.mode = s.into();
        }
        if let Some(d) = self.dropout {
            cfg.clients.dropout_rate = d;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let (Some(path), Some(label)) = (&self.data, &self.label_column) {
            cfg.data = DataSource::Csv {
                path: path.clone(),
                options: CsvOptions::new(label.clone()),
            };
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub repeats: u32,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Directory holding the first collection of runs.
    pub a: PathBuf,
    /// Directory holding the second collection of runs.
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Run directory written by `run` (or a sweep cell).
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub anomaly_frac: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
}
