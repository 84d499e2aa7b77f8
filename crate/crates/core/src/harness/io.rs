//! CSV files: curve panels (with a grid sidecar), discrete observations,
//! truth sets, per-replication decisions and result tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::covtest::{CurvePanel, Pair};
use crate::error::{Error, Result};
use crate::presmooth::DiscretePanel;
use crate::quadrature::FunctionGrid;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        kind => Error::Parse { path: path.to_path_buf(), line, message: format!("{kind:?}") },
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Writes serializable rows with a header taken from the field names.
pub fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads rows with a header; returns each row with its line number.
pub fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, R)>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let row: R = rec.map_err(|e| csv_err(path, e))?;
        out.push((out.len() + 2, row));
    }
    Ok(out)
}

/// `panel.csv` keeps its grid in `panel.grid.csv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("grid.csv")
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelRow {
    subject: usize,
    variable: usize,
    time_index: usize,
    value: f64,
}

pub fn write_panel(path: &Path, panel: &CurvePanel<f64>) -> Result<()> {
    panel.grid().write_sidecar(&sidecar_path(path))?;
    let l = panel.len();
    let rows: Vec<PanelRow> = panel
        .values()
        .iter()
        .enumerate()
        .map(|(idx, &value)| {
            let (cell, t) = (idx / l, idx % l);
            PanelRow { subject: cell / panel.p(), variable: cell % panel.p(), time_index: t, value }
        })
        .collect();
    write_rows(path, &rows)
}

/// Reads a panel and its sidecar. Every `(subject, variable, time_index)`
/// cell must appear exactly once.
pub fn read_panel(path: &Path) -> Result<CurvePanel<f64>> {
    let grid = FunctionGrid::read_sidecar(&sidecar_path(path))?;
    let rows: Vec<(usize, PanelRow)> = read_rows(path)?;
    let l = grid.len();
    let n = rows.iter().map(|(_, r)| r.subject + 1).max().unwrap_or(0);
    let p = rows.iter().map(|(_, r)| r.variable + 1).max().unwrap_or(0);
    if n == 0 {
        return Err(parse_err(path, 1, "panel has no rows"));
    }
    let mut values = vec![f64::NAN; n * p * l];
    let mut seen = vec![false; n * p * l];
    for (line, r) in rows {
        if r.time_index >= l {
            return Err(parse_err(path, line, format!("time_index {} beyond grid of {l}", r.time_index)));
        }
        let idx = (r.subject * p + r.variable) * l + r.time_index;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(parse_err(path, line, "duplicate cell"));
        }
        values[idx] = r.value;
    }
    if let Some(idx) = seen.iter().position(|s| !s) {
        let (cell, t) = (idx / l, idx % l);
        return Err(parse_err(
            path,
            0,
            format!("missing value for subject {}, variable {}, time_index {t}", cell / p, cell % p),
        ));
    }
    CurvePanel::new(grid, n, p, values)
}

#[derive(Debug, Serialize, Deserialize)]
struct DiscreteRow {
    subject: usize,
    variable: usize,
    time: f64,
    value: f64,
}

pub fn write_discrete(path: &Path, dp: &DiscretePanel) -> Result<()> {
    let mut rows = Vec::new();
    for subject in 0..dp.n() {
        for variable in 0..dp.p() {
            rows.extend(
                dp.observations(subject, variable)
                    .iter()
                    .map(|&(time, value)| DiscreteRow { subject, variable, time, value }),
            );
        }
    }
    write_rows(path, &rows)
}

pub fn read_discrete(path: &Path) -> Result<DiscretePanel> {
    let rows: Vec<(usize, DiscreteRow)> = read_rows(path)?;
    let n = rows.iter().map(|(_, r)| r.subject + 1).max().unwrap_or(0);
    let p = rows.iter().map(|(_, r)| r.variable + 1).max().unwrap_or(0);
    let mut obs = vec![Vec::new(); n * p];
    for (_, r) in rows {
        obs[r.subject * p + r.variable].push((r.time, r.value));
    }
    DiscretePanel::new(n, p, obs)
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    j: usize,
    k: usize,
}

pub fn write_truth(path: &Path, h1: &[Pair]) -> Result<()> {
    let rows: Vec<TruthRow> = h1.iter().map(|&(j, k)| TruthRow { j, k }).collect();
    write_rows(path, &rows)
}

/// Reads `j,k` rows, ordering each pair as `j < k`.
pub fn read_truth(path: &Path) -> Result<Vec<Pair>> {
    let rows: Vec<(usize, TruthRow)> = read_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, TruthRow { j, k }) in rows {
        if j == k {
            return Err(parse_err(path, line, format!("({j}, {k}) is not an off-diagonal pair")));
        }
        out.push((j.min(k), j.max(k)));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// One line of the decisions file. Thresholding baselines have no p-value
/// or score, and their statistic is the surface norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub replication: usize,
    pub method: String,
    pub j: usize,
    pub k: usize,
    pub statistic: f64,
    pub pvalue: Option<f64>,
    #[serde(rename = "V")]
    pub v: Option<f64>,
    /// 1 when the pair is declared an edge.
    pub rejected: u8,
}

pub fn write_decisions(path: &Path, rows: &[DecisionRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRow>> {
    Ok(read_rows(path)?.into_iter().map(|(_, r)| r).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}
