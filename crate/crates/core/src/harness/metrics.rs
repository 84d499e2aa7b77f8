//! Empirical false discovery rate and power over replications.

use std::collections::HashSet;

use crate::covtest::Pair;
use crate::error::{Error, Result};

/// `|rejected ∩ H0| / max(1, |rejected|)` for one replication.
pub fn false_discovery_proportion(rejected: &[Pair], h1: &HashSet<Pair>) -> f64 {
    let false_hits = rejected.iter().filter(|p| !h1.contains(p)).count();
    false_hits as f64 / rejected.len().max(1) as f64
}

/// `|rejected ∩ H1| / |H1|` for one replication.
pub fn true_positive_proportion(rejected: &[Pair], h1: &HashSet<Pair>) -> Result<f64> {
    if h1.is_empty() {
        return Err(Error::PowerUndefined);
    }
    let hits = rejected.iter().filter(|p| h1.contains(p)).count();
    Ok(hits as f64 / h1.len() as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

/// Mean false discovery proportion over replications.
pub fn empirical_fdr(rejections: &[Vec<Pair>], h1: &[Pair]) -> Result<f64> {
    if rejections.is_empty() {
        return Err(Error::invalid("empirical FDR needs at least one replication"));
    }
    let h1: HashSet<Pair> = h1.iter().copied().collect();
    Ok(mean(rejections.iter().map(|r| false_discovery_proportion(r, &h1))))
}

/// Mean proportion of true alternatives found.
pub fn empirical_power(rejections: &[Vec<Pair>], h1: &[Pair]) -> Result<f64> {
    let h1: HashSet<Pair> = h1.iter().copied().collect();
    if h1.is_empty() {
        return Err(Error::PowerUndefined);
    }
    if rejections.is_empty() {
        return Err(Error::invalid("empirical power needs at least one replication"));
    }
    let tpp: Vec<f64> = rejections.iter().map(|r| true_positive_proportion(r, &h1)).collect::<Result<_>>()?;
    Ok(mean(tpp.into_iter()))
}
