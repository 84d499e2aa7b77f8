//! Replication studies: simulate, run every requested method, score the
//! decisions against the truth and persist everything.

pub mod config;
pub mod io;
pub mod metrics;
pub mod report;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Method};
pub use io::DecisionRow;
pub use metrics::{empirical_fdr, empirical_power};

use crate::covtest::{compute_grams, records_from_grams, Pair, PairTestRecord};
use crate::error::{Error, Result};
use crate::fgm::{fgm_select, FgmContext, TauSelection};
use crate::mtproc::{bh_procedure, bonferroni, select_threshold, TestBattery};
use crate::presmooth::smooth_panel;
use crate::simgen::{draw_design, draw_replication, Design, GroundTruth};
use crate::threshbase::{CvConfig, PairSummaries, ThresholdMode};

/// One cell of the result table: a method at one level, or a thresholding
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub model: String,
    pub n: usize,
    pub p: usize,
    pub observation: String,
    pub alpha: Option<f64>,
    pub fdr: Option<f64>,
    pub power: Option<f64>,
    /// Share of replications where the searched threshold existed.
    pub t_hat_exists: Option<f64>,
    /// Mean seconds per replication, shared stages included.
    pub wall_seconds: f64,
    pub completed: usize,
    /// Some replication failed before this cell was scored.
    pub incomplete: bool,
}

/// A replication abandoned at `stage`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replication: usize,
    pub stage: String,
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub decisions: Vec<DecisionRow>,
    pub failures: Vec<Failure>,
    pub truth: GroundTruth,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    package: &'static str,
    version: &'static str,
    config: BTreeMap<String, String>,
    base_seed: u64,
    design_stream: u64,
    replication_seeds: Vec<u64>,
    workers: usize,
    total_seconds: f64,
    replications: usize,
    completed: usize,
    true_alternatives: usize,
    failures: &'a [Failure],
    results: &'a [ResultRow],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    method: Method,
    alpha: Option<f64>,
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        if method.uses_alpha() {
            out.extend(cfg.alphas.iter().map(|&a| Cell { method, alpha: Some(a) }));
        } else {
            out.push(Cell { method, alpha: None });
        }
    }
    out
}

struct CellResult {
    rejected: Vec<Pair>,
    exists: Option<bool>,
    seconds: f64,
    rows: Vec<DecisionRow>,
}

/// Decision rows for a battery of test records.
pub fn record_rows(replication: usize, label: &str, records: &[PairTestRecord], rejected: &[Pair]) -> Vec<DecisionRow> {
    let hit: HashSet<Pair> = rejected.iter().copied().collect();
    records
        .iter()
        .map(|r| DecisionRow {
            replication,
            method: label.to_string(),
            j: r.j,
            k: r.k,
            statistic: r.statistic,
            pvalue: Some(r.pvalue),
            v: Some(r.v),
            rejected: u8::from(hit.contains(&r.pair())),
        })
        .collect()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

struct Replicate<'a> {
    cfg: &'a ExperimentConfig,
    design: &'a Design,
    cells: &'a [Cell],
}

/// Output of a shared stage with the seconds it took.
struct Stage<T> {
    value: T,
    seconds: f64,
}

struct CovStage {
    grams: crate::covtest::GramSet<f64>,
    records: Vec<PairTestRecord>,
    battery: TestBattery,
}

struct FgmStage {
    ctx: FgmContext,
    selection: TauSelection,
    battery: TestBattery,
}

impl Replicate<'_> {
    fn run(&self, r: usize) -> std::result::Result<Vec<CellResult>, Failure> {
        let fail = |stage: &str| {
            let stage = stage.to_string();
            move |e: Error| Failure { replication: r, stage, class: e.class().to_string(), message: e.to_string() }
        };
        let cfg = self.cfg;
        let (rep, gen_secs) = timed(|| draw_replication(&cfg.sim, self.design, r as u64));
        let rep = rep.map_err(fail("generate"))?;
        let (panel, prep_secs) = match &rep.discrete {
            None => (rep.panel, gen_secs),
            Some(dp) => {
                let (smoothed, secs) = timed(|| cfg.sim.grid().and_then(|g| smooth_panel(dp, &g, &cfg.smoother)));
                (smoothed.map_err(fail("smooth"))?.panel, gen_secs + secs)
            }
        };
        let dag = cfg.sim.model.is_dag();
        let baseline = |m: Method| matches!(m, Method::Bh | Method::Bc | Method::Hard | Method::Soft);
        let need_cov = self.cells.iter().any(|c| c.method == Method::Mfc || (!dag && baseline(c.method)));
        let need_fgm = self.cells.iter().any(|c| c.method == Method::Mfg || (dag && baseline(c.method)));

        let cov = if need_cov {
            let (value, seconds) = timed(|| -> Result<CovStage> {
                let grams = compute_grams(&panel.center()?)?;
                let records = records_from_grams(&grams)?;
                let battery = TestBattery::from_records(&records)?;
                Ok(CovStage { grams, records, battery })
            });
            Some(Stage { value: value.map_err(fail("covtest"))?, seconds })
        } else {
            None
        };
        let fgm = if need_fgm {
            let (value, seconds) = timed(|| -> Result<FgmStage> {
                let (ctx, selection) = fgm_select(&panel, cfg.pve, cfg.tau_grid_size, cfg.tau_ratio)?;
                let battery = TestBattery::from_records(&selection.records)?;
                Ok(FgmStage { ctx, selection, battery })
            });
            Some(Stage { value: value.map_err(fail("fgm"))?, seconds })
        } else {
            None
        };

        let cv = CvConfig { seed: cfg.sim.seed.wrapping_add(r as u64), ..cfg.cv };
        let mut summaries: Option<Stage<PairSummaries>> = None;
        let mut out = Vec::with_capacity(self.cells.len());
        for cell in self.cells {
            let label = cfg.label(cell.method, cell.alpha);
            // battery, records and shared seconds of the stage this cell reads
            let source = |graph: bool| -> (&TestBattery, &[PairTestRecord], f64) {
                if graph {
                    let s = fgm.as_ref().expect("fgm stage ran");
                    (&s.value.battery, &s.value.selection.records, s.seconds)
                } else {
                    let s = cov.as_ref().expect("covtest stage ran");
                    (&s.value.battery, &s.value.records, s.seconds)
                }
            };
            let result = match cell.method {
                Method::Mfc | Method::Mfg | Method::Bh | Method::Bc => {
                    let alpha = cell.alpha.expect("level-based method");
                    let graph = match cell.method {
                        Method::Mfc => false,
                        Method::Mfg => true,
                        _ => dag,
                    };
                    let (battery, records, shared) = source(graph);
                    let (picked, secs) = timed(|| -> Result<(Vec<Pair>, Option<bool>)> {
                        Ok(match cell.method {
                            Method::Bh => (bh_procedure(battery, alpha)?, None),
                            Method::Bc => (bonferroni(battery, alpha)?, None),
                            _ => {
                                let ds = select_threshold(battery, alpha)?;
                                (ds.rejected, Some(ds.exists))
                            }
                        })
                    });
                    let (rejected, exists) = picked.map_err(fail("mtproc"))?;
                    let rows = record_rows(r, &label, records, &rejected);
                    CellResult { rejected, exists, seconds: prep_secs + shared + secs, rows }
                }
                Method::Hard | Method::Soft => {
                    if summaries.is_none() {
                        let (value, seconds) = timed(|| match &fgm {
                            Some(s) if dag => {
                                let (ctx, fits) = (&s.value.ctx, &s.value.selection.fits);
                                let pairs = fits.iter().map(|(a, _)| (a.j, a.k)).collect();
                                PairSummaries::from_fn(pairs, panel.n(), &cv, |q| ctx.residual_grams(&fits[q].0, &fits[q].1))
                            }
                            _ => PairSummaries::from_gram_set(&cov.as_ref().expect("covtest stage ran").value.grams, &cv),
                        });
                        summaries = Some(Stage { value: value.map_err(fail("threshbase"))?, seconds });
                    }
                    let sums = summaries.as_ref().expect("just built");
                    let mode = if cell.method == Method::Hard { ThresholdMode::Hard } else { ThresholdMode::Soft };
                    let (est, secs) = timed(|| sums.value.threshold(mode, cfg.cv.grid_size));
                    let (_, est) = est.map_err(fail("threshbase"))?;
                    let hit: HashSet<Pair> = est.adjacency.iter().copied().collect();
                    let rows = est
                        .pairs
                        .iter()
                        .zip(&est.norms)
                        .map(|(&(j, k), &norm)| DecisionRow {
                            replication: r,
                            method: label.clone(),
                            j,
                            k,
                            statistic: norm,
                            pvalue: None,
                            v: None,
                            rejected: u8::from(hit.contains(&(j, k))),
                        })
                        .collect();
                    let shared = source(dag).2;
                    CellResult { rejected: est.adjacency, exists: None, seconds: prep_secs + shared + sums.seconds + secs, rows }
                }
            };
            out.push(result);
        }
        Ok(out)
    }
}

/// Runs the whole study. Replication `r` draws its data from seed
/// `seed + r`, so results never depend on the worker count. Artifacts are
/// written when an output directory is configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let design = draw_design(&cfg.sim)?;
    let truth = design.truth().clone();
    let cells = cells(cfg);
    let job = Replicate { cfg, design: &design, cells: &cells };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let workers = pool.current_num_threads();
    let outcomes: Vec<_> = pool.install(|| (0..cfg.replications).into_par_iter().map(|r| job.run(r)).collect());

    let mut failures = Vec::new();
    let mut done: Vec<Vec<CellResult>> = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(cells) => done.push(cells),
            Err(f) => failures.push(f),
        }
    }
    let completed = done.len();
    let observation = cfg.sim.observation.to_string();
    let mut rows = Vec::with_capacity(cells.len());
    for (c, cell) in cells.iter().enumerate() {
        let reps: Vec<Vec<Pair>> = done.iter().map(|cr| cr[c].rejected.clone()).collect();
        let (fdr, power) = if reps.is_empty() {
            (None, None)
        } else {
            let power = match empirical_power(&reps, &truth.h1) {
                Ok(v) => Some(v),
                Err(Error::PowerUndefined) => None,
                Err(e) => return Err(e),
            };
            (Some(empirical_fdr(&reps, &truth.h1)?), power)
        };
        let exists: Vec<bool> = done.iter().filter_map(|cr| cr[c].exists).collect();
        let t_hat_exists = (!exists.is_empty()).then(|| exists.iter().filter(|&&e| e).count() as f64 / exists.len() as f64);
        let wall = done.iter().map(|cr| cr[c].seconds).sum::<f64>() / completed.max(1) as f64;
        rows.push(ResultRow {
            method: cfg.label(cell.method, cell.alpha),
            model: cfg.sim.model.to_string(),
            n: cfg.sim.n,
            p: cfg.sim.p,
            observation: observation.clone(),
            alpha: cell.alpha,
            fdr,
            power,
            t_hat_exists,
            wall_seconds: wall,
            completed,
            incomplete: completed < cfg.replications,
        });
    }
    let decisions: Vec<DecisionRow> = done.into_iter().flat_map(|cr| cr.into_iter().flat_map(|c| c.rows)).collect();
    let output = ExperimentOutput { rows, decisions, failures, truth, seconds: start.elapsed().as_secs_f64() };
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, cfg, &output, workers)?;
    }
    Ok(output)
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, output: &ExperimentOutput, workers: usize) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_rows(&dir.join("results.csv"), &output.rows)?;
    io::write_decisions(&dir.join("decisions.csv"), &output.decisions)?;
    io::write_truth(&dir.join("truth.csv"), &output.truth.h1)?;
    let summary = RunSummary {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.to_pairs().into_iter().collect(),
        base_seed: cfg.sim.seed,
        design_stream: 1,
        replication_seeds: (0..cfg.replications as u64).map(|r| cfg.sim.seed.wrapping_add(r)).collect(),
        workers,
        total_seconds: output.seconds,
        replications: cfg.replications,
        completed: output.rows.first().map_or(0, |r| r.completed),
        true_alternatives: output.truth.h1.len(),
        failures: &output.failures,
        results: &output.rows,
    };
    io::write_json(&dir.join("summary.json"), &summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_pairs;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_pairs(&parse_pairs(text, Path::new("t")).unwrap()).unwrap()
    }

    #[test]
    fn single_replication_gives_one_row_and_q_decisions() {
        let out = run_experiment(&cfg("model=cov1\nn=50\np=5\nmethods=MFC\nreplications=1")).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.decisions.len(), 10);
        assert!(out.failures.is_empty());
        let row = &out.rows[0];
        assert!(!row.incomplete);
        assert!(row.fdr.is_some_and(|f| (0.0..=1.0).contains(&f)));
    }

    #[test]
    fn every_method_produces_a_full_battery() {
        let out = run_experiment(&cfg("model=cov1\nn=40\np=6\nmethods=MFC,BH,BC,hard,soft\nalpha=0.05,0.1\nreplications=2")).unwrap();
        let labels: Vec<&str> = out.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(labels, ["MFC@0.05", "MFC@0.1", "BH@0.05", "BH@0.1", "BC@0.05", "BC@0.1", "hard", "soft"]);
        assert_eq!(out.decisions.len(), 2 * 8 * 15);
        assert!(out.rows.iter().all(|r| r.power.is_some()));
        assert!(out.rows[0].t_hat_exists.is_some() && out.rows[2].t_hat_exists.is_none());
    }

    #[test]
    fn failures_are_recorded_and_flagged() {
        // three subjects are enough to test but too few to cross-validate
        let out = run_experiment(&cfg("model=cov1\nn=3\np=4\nmethods=MFC,hard\nreplications=2")).unwrap();
        assert_eq!(out.failures.len(), 2);
        assert_eq!(out.failures[0].stage, "threshbase");
        assert_eq!(out.failures[0].class, "TooFewSubjects");
        assert!(out.rows.iter().all(|r| r.incomplete && r.completed == 0 && r.fdr.is_none()));
        assert!(out.decisions.is_empty());
    }

    #[test]
    fn report_reproduces_the_runner_exactly() {
        let out = run_experiment(&cfg("model=cov2\nn=40\np=8\nalpha=0.05,0.2\nreplications=3\nseed=9")).unwrap();
        let table = report::summarize_decisions(&out.decisions, &out.truth.h1).unwrap();
        assert_eq!(table.len(), out.rows.len());
        for (t, r) in table.iter().zip(&out.rows) {
            assert_eq!(t.method, r.method);
            assert_eq!(Some(t.fdr), r.fdr);
            assert_eq!(t.power, r.power);
        }
    }
}
