use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use funcov::covtest::all_pair_records;
use funcov::fgm::fgm_select;
use funcov::harness::config::read_pairs;
use funcov::harness::io::{self, read_decisions, read_discrete, read_panel, read_truth, write_decisions, write_panel};
use funcov::harness::report::summarize_decisions;
use funcov::harness::{record_rows, run_experiment, DecisionRow, ExperimentConfig, Method};
use funcov::mtproc::{select_threshold, TestBattery};
use funcov::presmooth::smooth_panel;
use funcov::simgen::{draw_design, draw_replication};
use funcov::{Error, PairTestRecord, Result};

#[derive(Parser)]
#[command(name = "funcov", version, about = "Multiple testing of cross-covariance functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Each overrides the same key of the config
/// file; `--set key=value` reaches any other key.
#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// One level or a comma-separated list.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any config key, e.g. `--set model=cov2 --set n=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one data set and write its panel, truth and discrete file.
    Simulate {
        /// Replication index; the data seed is `seed + replication`.
        #[arg(long, default_value_t = 0)]
        replication: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Covariance-network testing on a panel file.
    Mfc {
        panel: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Graphical-model testing on a panel file.
    Mfg {
        panel: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct curves from a discrete observation file.
    Smooth {
        discrete: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Full replication study.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// FDR and power per method from a decisions file.
    Report {
        decisions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => read_pairs(path)?,
            None => Vec::new(),
        };
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {item:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("alpha", self.alpha.clone()),
            ("workers", self.workers.map(|w| w.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(pairs)
    }

    fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_pairs(&self.pairs()?)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    io::ensure_dir(&dir)?;
    Ok(dir)
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?
        .install(f)
}

fn simulate(common: &Common, replication: u64) -> Result<()> {
    let cfg = common.config()?;
    let dir = out_dir(&cfg)?;
    let design = draw_design(&cfg.sim)?;
    let rep = in_pool(cfg.workers, || draw_replication(&cfg.sim, &design, replication))?;
    write_panel(&dir.join("panel.csv"), &rep.panel)?;
    io::write_truth(&dir.join("truth.csv"), &design.truth().h1)?;
    println!("panel {}", dir.join("panel.csv").display());
    println!("truth {} ({} pairs)", dir.join("truth.csv").display(), design.truth().h1.len());
    if let Some(dp) = &rep.discrete {
        io::write_discrete(&dir.join("discrete.csv"), dp)?;
        println!("discrete {}", dir.join("discrete.csv").display());
    }
    Ok(())
}

/// Runs the data-driven threshold at every configured level and writes the
/// decisions of a single data set.
fn test_panel(cfg: &ExperimentConfig, method: Method, records: &[PairTestRecord]) -> Result<()> {
    let battery = TestBattery::from_records(records)?;
    let mut rows: Vec<DecisionRow> = Vec::new();
    for &alpha in &cfg.alphas {
        let ds = select_threshold(&battery, alpha)?;
        let label = cfg.label(method, Some(alpha));
        println!(
            "{label}: t_hat {:.4} ({}), {} of {} pairs rejected",
            ds.t_hat,
            if ds.exists { "found" } else { "fallback" },
            ds.rejected.len(),
            battery.q()
        );
        rows.extend(record_rows(0, &label, records, &ds.rejected));
    }
    let path = out_dir(cfg)?.join("decisions.csv");
    write_decisions(&path, &rows)?;
    println!("decisions {}", path.display());
    Ok(())
}

fn mfc(common: &Common, panel: &Path) -> Result<()> {
    let cfg = common.config()?;
    let panel = read_panel(panel)?;
    let records = in_pool(cfg.workers, || all_pair_records(&panel))?;
    test_panel(&cfg, Method::Mfc, &records)
}

fn mfg(common: &Common, panel: &Path) -> Result<()> {
    let cfg = common.config()?;
    let panel = read_panel(panel)?;
    let (_, sel) = in_pool(cfg.workers, || fgm_select(&panel, cfg.pve, cfg.tau_grid_size, cfg.tau_ratio))?;
    println!("tau {:.6} selected from {} values", sel.tau, sel.taus.len());
    test_panel(&cfg, Method::Mfg, &sel.records)
}

fn smooth(common: &Common, discrete: &Path) -> Result<()> {
    let cfg = common.config()?;
    let dp = read_discrete(discrete)?;
    let grid = cfg.sim.grid()?;
    let smoothed = in_pool(cfg.workers, || smooth_panel::<f64>(&dp, &grid, &cfg.smoother))?;
    let path = out_dir(&cfg)?.join("panel.csv");
    write_panel(&path, &smoothed.panel)?;
    if !smoothed.flagged.is_empty() {
        eprintln!("warning: {} curves used the degenerate-design fallback", smoothed.flagged.len());
    }
    println!("panel {}", path.display());
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.4}"))
}

fn experiment(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let out = run_experiment(&cfg)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "method,alpha,fdr,power,t_hat_exists,completed,wall_seconds");
    for r in &out.rows {
        let _ = writeln!(
            stdout,
            "{},{},{},{},{},{},{:.3}",
            r.method,
            r.alpha.map_or_else(String::new, |a| a.to_string()),
            fmt_opt(r.fdr),
            fmt_opt(r.power),
            fmt_opt(r.t_hat_exists),
            r.completed,
            r.wall_seconds
        );
    }
    for f in &out.failures {
        eprintln!("replication {} failed at {}: {} {}", f.replication, f.stage, f.class, f.message);
    }
    if let Some(dir) = &cfg.out_dir {
        let _ = writeln!(stdout, "# outputs in {}", dir.display());
    }
    Ok(())
}

fn report(common: &Common, decisions: &Path, truth: &Path) -> Result<()> {
    let rows = read_decisions(decisions)?;
    let h1 = read_truth(truth)?;
    let table = summarize_decisions(&rows, &h1)?;
    if let Some(dir) = &common.out {
        io::ensure_dir(dir)?;
        io::write_rows(&dir.join("report.csv"), &table)?;
    }
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "method,replications,fdr_percent,power_percent,mean_rejections");
    for r in &table {
        let _ = writeln!(
            stdout,
            "{},{},{:.2},{},{:.2}",
            r.method,
            r.replications,
            r.fdr_percent,
            r.power_percent.map_or_else(String::new, |p| format!("{p:.2}")),
            r.mean_rejections
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { replication, common } => simulate(&common, replication),
        Command::Mfc { panel, common } => mfc(&common, &panel),
        Command::Mfg { panel, common } => mfg(&common, &panel),
        Command::Smooth { discrete, common } => smooth(&common, &discrete),
        Command::Experiment { common } => experiment(&common),
        Command::Report { decisions, truth, common } => report(&common, &decisions, &truth),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
