mod args;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::Parser;
use fedsim::config::{DataSource, ExperimentConfig, SweepSpec};
use fedsim::{data, experiment, sweep};

use args::{Cli, Command, CompareArgs, GenDataArgs, ReplayArgs, SweepArgs};

/// Marks an error as the caller's fault (exit code 1).
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || matches!(cause.downcast_ref(), Some(fedsim::Error::InvalidConfig { .. })) {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let base = base_config(cli.config.as_deref(), cli.seed)?;
    match &cli.command {
        Command::Run(o) => {
            let mut cfg = base;
            o.apply(&mut cfg);
            run(cfg, cli.out)
        }
        Command::Sweep(a) => run_sweep(base, a, cli.out),
        Command::Compare(a) => compare(a, cli.out.as_deref()),
        Command::Replay(a) => replay(a),
        Command::GenData(a) => gen_data(base, a, cli.out),
    }
}

/// Defaults, then the config file, then `--seed`.
fn base_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("in {}", p.display()))?;
            // relative CSV paths are relative to the config file
            resolve_data_path(cfg, p.parent().unwrap_or(Path::new(".")))
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn resolve_data_path(mut cfg: ExperimentConfig, dir: &Path) -> ExperimentConfig {
    if let DataSource::Csv { path, .. } = &mut cfg.data {
        if path.is_relative() {
            *path = dir.join(&*path);
        }
    }
    cfg
}

fn run(cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    cfg.validate()?;
    let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-s{}", cfg.mode.as_str(), cfg.seed)));
    let o = experiment::run_to_dir(&cfg, &out)
        .with_context(|| format!("run failed; partial artifacts in {}", out.display()))?;
    let s = &o.summary;
    println!("wrote {}", out.display());
    println!(
        "mode={} clients={} rounds={} accuracy={:.4} auc={:.4} comm_time_s={:.3} updates={} accepted_frac={:.3}",
        s.mode, s.num_clients, s.rounds, s.accuracy, s.auc, s.comm_time_s, s.updates, s.accepted_frac
    );
    println!("digest={}", s.digest);
    Ok(())
}

fn run_sweep(base: ExperimentConfig, a: &SweepArgs, out: Option<PathBuf>) -> Result<()> {
    let mut base = base;
    a.overrides.apply(&mut base);
    base.validate()?;
    let spec = SweepSpec {
        axis: a.axis.into(),
        values: a.values.clone(),
        repeats: a.repeats,
    };
    spec.validate()?;
    let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/sweep-s{}", base.seed)));
    let rows = sweep::sweep(&base, &spec, Some(&out))?;
    let failed: Vec<_> = rows.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        eprintln!(
            "cell value={} repeat={} failed: {}",
            r.value,
            r.repeat,
            r.error.as_deref().unwrap_or("")
        );
    }
    println!("wrote {}", out.display());
    println!(
        "{:>10} {:>5} {:>9} {:>9} {:>12} {:>9}",
        "value", "runs", "accuracy", "auc", "comm_time_s", "accepted"
    );
    for m in sweep::means(&rows) {
        println!(
            "{:>10} {:>5} {:>9.4} {:>9.4} {:>12.3} {:>9.3}",
            m.value, m.runs, m.accuracy, m.auc, m.comm_time_s, m.accepted_frac
        );
    }
    if failed.len() == rows.len() {
        bail!("every sweep cell failed");
    }
    Ok(())
}

fn compare(a: &CompareArgs, out: Option<&Path>) -> Result<()> {
    let c = sweep::compare(&a.a, &a.b)?;
    println!("a: {} runs, mean auc {:.4}", c.n_a, c.mean_auc_a);
    println!("b: {} runs, mean auc {:.4}", c.n_b, c.mean_auc_b);
    println!(
        "U = {}  p(two-sided) = {:.4e}  p(a > b) = {:.4e}  [{:?}]",
        c.two_sided.u_statistic, c.two_sided.p_value, c.greater.p_value, c.two_sided.method
    );
    println!("verdict: {}", c.verdict());
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&c)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let check = experiment::replay(&a.dir)?;
    if !check.matches() {
        bail!(
            "replay of {} diverged\n  recorded: {:?}\n  replayed: {:?}",
            a.dir.display(),
            check.recorded,
            check.replayed
        );
    }
    println!("replay ok: {}", a.dir.display());
    Ok(())
}

fn gen_data(base: ExperimentConfig, a: &GenDataArgs, out: Option<PathBuf>) -> Result<()> {
    let DataSource::Synthetic {
        n,
        d,
        anomaly_frac,
        separation,
    } = base.data
    else {
        return Err(usage("gen-data needs a synthetic data source in the config"));
    };
    let (n, d) = (a.n.unwrap_or(n), a.d.unwrap_or(d));
    let frac = a.anomaly_frac.unwrap_or(anomaly_frac);
    let sep = a.separation.unwrap_or(separation);
    let ds = data::synth_anomaly(n, d, frac, sep, base.seed)?;
    let out = out.unwrap_or_else(|| PathBuf::from("synthetic.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    data::write_csv(&ds, &out)?;
    println!(
        "wrote {} ({} rows, {} features, {} anomalies)",
        out.display(),
        ds.len(),
        ds.n_features(),
        ds.count_label(1)
    );
    Ok(())
}
