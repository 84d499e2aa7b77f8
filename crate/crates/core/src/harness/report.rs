//! Table-style summaries recomputed from a decisions file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::io::DecisionRow;
use super::metrics::{empirical_fdr, empirical_power};
use crate::covtest::Pair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub replications: usize,
    pub fdr: f64,
    pub power: Option<f64>,
    pub fdr_percent: f64,
    pub power_percent: Option<f64>,
    pub mean_rejections: f64,
}

/// Rejected pairs per replication, in replication order.
pub fn rejections_by_replication<'a>(rows: impl IntoIterator<Item = &'a DecisionRow>) -> Vec<Vec<Pair>> {
    let mut by_rep: BTreeMap<usize, Vec<Pair>> = BTreeMap::new();
    for row in rows {
        let slot = by_rep.entry(row.replication).or_default();
        if row.rejected != 0 {
            slot.push((row.j, row.k));
        }
    }
    by_rep.into_values().collect()
}

/// One row per method label, in order of first appearance. The numbers are
/// computed exactly as the experiment runner computes its own.
pub fn summarize_decisions(rows: &[DecisionRow], h1: &[Pair]) -> Result<Vec<ReportRow>> {
    if rows.is_empty() {
        return Err(Error::invalid("decisions file has no rows"));
    }
    let mut labels: Vec<&str> = Vec::new();
    for row in rows {
        if !labels.contains(&row.method.as_str()) {
            labels.push(&row.method);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let reps = rejections_by_replication(rows.iter().filter(|r| r.method == label));
            let fdr = empirical_fdr(&reps, h1)?;
            let power = match empirical_power(&reps, h1) {
                Ok(v) => Some(v),
                Err(Error::PowerUndefined) => None,
                Err(e) => return Err(e),
            };
            let total: usize = reps.iter().map(Vec::len).sum();
            Ok(ReportRow {
                method: label.to_string(),
                replications: reps.len(),
                fdr,
                power,
                fdr_percent: 100.0 * fdr,
                power_percent: power.map(|p| 100.0 * p),
                mean_rejections: total as f64 / reps.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(replication: usize, method: &str, j: usize, k: usize, rejected: u8) -> DecisionRow {
        DecisionRow { replication, method: method.into(), j, k, statistic: 0.0, pvalue: None, v: None, rejected }
    }

    #[test]
    fn replications_without_rejections_still_count() {
        let rows = vec![
            row(0, "BH", 0, 1, 1),
            row(0, "BH", 0, 2, 1),
            row(1, "BH", 0, 1, 0),
            row(1, "BH", 0, 2, 0),
            row(0, "BC", 0, 1, 1),
            row(0, "BC", 0, 2, 0),
        ];
        let table = summarize_decisions(&rows, &[(0, 1)]).unwrap();
        assert_eq!(table[0].method, "BH");
        assert_eq!(table[0].replications, 2);
        assert_eq!(table[0].fdr, 0.25);
        assert_eq!(table[0].power, Some(0.5));
        assert_eq!(table[0].mean_rejections, 1.0);
        assert_eq!((table[1].fdr, table[1].power), (0.0, Some(1.0)));
        assert_eq!(summarize_decisions(&rows, &[]).unwrap()[0].power, None);
    }
}
