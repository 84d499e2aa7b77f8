//! FDP estimation, threshold selection with FDR control, and the
//! Benjamini–Hochberg and Bonferroni baselines.

use serde::{Deserialize, Serialize};

use crate::covtest::{Pair, PairTestRecord};
use crate::error::{Error, Result};
use crate::nulldist::{normal_sf, normal_upper_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub pair: Pair,
    pub pvalue: f64,
    pub v: f64,
}

/// The `Q` simultaneous hypotheses with their p-values and normal scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBattery {
    entries: Vec<BatteryEntry>,
}

impl TestBattery {
    pub fn new(entries: Vec<BatteryEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("a test battery needs at least one hypothesis"));
        }
        if let Some(e) = entries.iter().find(|e| !e.v.is_finite()) {
            return Err(Error::invalid(format!("non-finite score for pair {:?}", e.pair)));
        }
        Ok(Self { entries })
    }

    pub fn from_records(records: &[PairTestRecord]) -> Result<Self> {
        Self::new(
            records
                .iter()
                .map(|r| BatteryEntry { pair: r.pair(), pvalue: r.pvalue, v: r.v })
                .collect(),
        )
    }

    pub fn q(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[BatteryEntry] {
        &self.entries
    }

    /// `R(t) = #{q : V_q >= t}`.
    pub fn rejections_at(&self, t: f64) -> usize {
        self.entries.iter().filter(|e| e.v >= t).count()
    }
}

/// Threshold, rejections and diagnostics of one run of the procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverySet {
    pub t_hat: f64,
    /// Whether a feasible threshold was found in `[0, t_max]`.
    pub exists: bool,
    pub rejected: Vec<Pair>,
    pub fdp_hat_at_t: f64,
    pub alpha: f64,
}

/// `FDP̂(t) = Q (1 - Φ(t)) / max(1, R(t))`.
pub fn fdp_hat(t: f64, battery: &TestBattery) -> f64 {
    let r = battery.rejections_at(t).max(1);
    battery.q() as f64 * normal_sf(t) / r as f64
}

/// Upper end of the threshold search, `sqrt(2 log Q - 2 log log Q)`, or
/// `None` when the expression is undefined (`Q = 1`).
pub fn search_upper_bound(q: usize) -> Option<f64> {
    if q < 2 {
        return None;
    }
    let lq = (q as f64).ln();
    Some((2.0 * lq - 2.0 * lq.ln()).max(0.0).sqrt())
}

/// Fallback threshold `sqrt(2 log Q)`.
pub fn fallback_threshold(q: usize) -> f64 {
    (2.0 * (q as f64).ln()).sqrt()
}

fn check_level(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidLevel(alpha));
    }
    Ok(())
}

/// Smallest `t` in `[0, t_max]` with `FDP̂(t) <= α`, computed exactly.
///
/// Between consecutive distinct scores the rejection count is constant at
/// `r`, and `FDP̂` is continuous and decreasing there, so the smallest
/// feasible point of that piece is `max(Φ⁻¹(1 - α max(1, r)/Q), lower end)`.
/// The answer is the minimum over pieces. When the lower end of a piece is
/// selected it is attained in the next piece, which has more rejections.
pub fn select_threshold(battery: &TestBattery, alpha: f64) -> Result<DiscoverySet> {
    check_level(alpha)?;
    let q = battery.q();
    let qf = q as f64;

    let t_hat = search_upper_bound(q).and_then(|t_max| {
        let mut scores: Vec<f64> = battery.entries().iter().map(|e| e.v).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        // distinct values, descending, with R(t) at each
        let mut distinct: Vec<(f64, usize)> = Vec::new();
        for (idx, &v) in scores.iter().enumerate() {
            match distinct.last_mut() {
                Some((last, count)) if *last == v => *count = idx + 1,
                _ => distinct.push((v, idx + 1)),
            }
        }
        // pieces: (lo, hi, R) with the piece being (lo, hi]
        let mut best: Option<f64> = None;
        let mut consider = |lo: f64, hi: f64, r: usize| {
            let ratio = alpha * r.max(1) as f64 / qf;
            let crossing = if ratio >= 1.0 { f64::NEG_INFINITY } else { normal_upper_quantile(ratio) };
            let candidate = crossing.max(lo).max(0.0);
            if candidate <= hi && candidate <= t_max && best.is_none_or(|b| candidate < b) {
                best = Some(candidate);
            }
        };
        let top = distinct[0].0;
        consider(top, f64::INFINITY, 0);
        for (idx, &(v, r)) in distinct.iter().enumerate() {
            let lo = distinct.get(idx + 1).map_or(f64::NEG_INFINITY, |d| d.0);
            consider(lo, v, r);
        }
        best
    });

    let (t_hat, exists) = match t_hat {
        Some(t) => (t, true),
        None => (fallback_threshold(q), false),
    };
    let rejected = battery
        .entries()
        .iter()
        .filter(|e| e.v >= t_hat)
        .map(|e| e.pair)
        .collect();
    Ok(DiscoverySet { t_hat, exists, rejected, fdp_hat_at_t: fdp_hat(t_hat, battery), alpha })
}

/// Benjamini–Hochberg step-up: reject the `k*` smallest p-values, where
/// `k* = max{k : p_(k) <= α k / Q}`.
pub fn bh_procedure(battery: &TestBattery, alpha: f64) -> Result<Vec<Pair>> {
    check_level(alpha)?;
    let q = battery.q() as f64;
    let mut order: Vec<&BatteryEntry> = battery.entries().iter().collect();
    order.sort_by(|a, b| a.pvalue.total_cmp(&b.pvalue));
    let k_star = order
        .iter()
        .enumerate()
        .filter(|(idx, e)| e.pvalue <= alpha * (idx + 1) as f64 / q)
        .map(|(idx, _)| idx + 1)
        .next_back()
        .unwrap_or(0);
    let cutoff = if k_star == 0 { f64::NEG_INFINITY } else { order[k_star - 1].pvalue };
    Ok(battery
        .entries()
        .iter()
        .filter(|e| e.pvalue <= cutoff)
        .map(|e| e.pair)
        .collect())
}

/// Reject iff `p <= α / Q`.
pub fn bonferroni(battery: &TestBattery, alpha: f64) -> Result<Vec<Pair>> {
    check_level(alpha)?;
    let cut = alpha / battery.q() as f64;
    Ok(battery
        .entries()
        .iter()
        .filter(|e| e.pvalue <= cut)
        .map(|e| e.pair)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn battery_from_scores(v: &[f64]) -> TestBattery {
        TestBattery::new(
            v.iter()
                .enumerate()
                .map(|(i, &v)| BatteryEntry { pair: (i, i + 1), pvalue: normal_sf(v), v })
                .collect(),
        )
        .unwrap()
    }

    fn battery_from_pvalues(p: &[f64]) -> TestBattery {
        TestBattery::new(
            p.iter()
                .enumerate()
                .map(|(i, &pv)| BatteryEntry { pair: (i, i + 1), pvalue: pv, v: 0.0 })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fdp_floor_and_cancellation() {
        let b = battery_from_scores(&[0.0, 0.1, 0.2]);
        assert_abs_diff_eq!(fdp_hat(5.0, &b), 3.0 * normal_sf(5.0));
        assert_abs_diff_eq!(fdp_hat(-1.0, &b), normal_sf(-1.0), epsilon = 1e-15);
    }

    #[test]
    fn fdp_worked_example() {
        let b = battery_from_scores(&[3.0, 2.0, 1.0, 0.0]);
        assert_abs_diff_eq!(fdp_hat(1.5, &b), 0.13361, epsilon = 1e-4);
        assert_abs_diff_eq!(normal_sf(1.5), 0.066807, epsilon = 1e-6);
    }

    #[test]
    fn all_strong_scores() {
        let b = battery_from_scores(&[10.0; 100]);
        let d = select_threshold(&b, 0.1).unwrap();
        assert!(d.exists);
        assert_abs_diff_eq!(d.t_hat, 1.281552, epsilon = 1e-5);
        assert_eq!(d.rejected.len(), 100);
        assert!(d.fdp_hat_at_t <= 0.1 * (1.0 + 1e-12));
    }

    #[test]
    fn fallback_when_nothing_feasible() {
        let b = battery_from_scores(&[-0.5; 10]);
        let d = select_threshold(&b, 0.01).unwrap();
        assert!(!d.exists);
        assert_abs_diff_eq!(d.t_hat, 2.14597, epsilon = 1e-5);
        assert!(d.rejected.is_empty());
        let t_max = search_upper_bound(10).unwrap();
        assert_abs_diff_eq!(normal_sf(t_max), 0.0433, epsilon = 1e-4);
        assert!(10.0 * normal_sf(t_max) > 0.01);
    }

    #[test]
    fn invalid_levels() {
        let b = battery_from_scores(&[1.0, 2.0, 3.0]);
        for alpha in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(select_threshold(&b, alpha), Err(Error::InvalidLevel(_))));
            assert!(bh_procedure(&b, alpha).is_err());
            assert!(bonferroni(&b, alpha).is_err());
        }
    }

    #[test]
    fn single_hypothesis_uses_fallback() {
        let b = battery_from_scores(&[1.0]);
        let d = select_threshold(&b, 0.05).unwrap();
        assert!(!d.exists);
        assert_eq!(d.t_hat, 0.0);
    }

    #[test]
    fn tied_scores_share_a_breakpoint() {
        let b = battery_from_scores(&[3.0, 3.0, 3.0, 0.0, 0.0, -1.0, -1.0, 0.5, 0.2, 0.1]);
        let d = select_threshold(&b, 0.2).unwrap();
        assert!(d.exists);
        assert_eq!(d.rejected.len(), 3);
        assert!(d.fdp_hat_at_t <= 0.2 * (1.0 + 1e-12));
    }

    #[test]
    fn bh_examples() {
        let b = battery_from_pvalues(&[0.001, 0.5]);
        assert_eq!(bh_procedure(&b, 0.05).unwrap(), vec![(0, 1)]);
        assert!(bh_procedure(&battery_from_pvalues(&[1.0; 5]), 0.05).unwrap().is_empty());
        assert_eq!(bh_procedure(&battery_from_pvalues(&[0.0; 5]), 0.05).unwrap().len(), 5);
    }

    #[test]
    fn bonferroni_examples() {
        let mut p = vec![0.9; 100];
        p[0] = 0.0004;
        p[1] = 0.0006;
        let rejected = bonferroni(&battery_from_pvalues(&p), 0.05).unwrap();
        assert_eq!(rejected, vec![(0, 1)]);
        assert_eq!(bonferroni(&battery_from_pvalues(&[0.04]), 0.05).unwrap().len(), 1);
        assert!(bonferroni(&battery_from_pvalues(&[0.06]), 0.05).unwrap().is_empty());
    }

    /// Dense scan of `[0, t_max]`: smallest grid point with `FDP̂ <= α`.
    fn grid_scan(b: &TestBattery, alpha: f64, points: usize) -> Option<f64> {
        let t_max = search_upper_bound(b.q())?;
        (0..=points)
            .map(|i| t_max * i as f64 / points as f64)
            .find(|&t| fdp_hat(t, b) <= alpha)
    }

    proptest! {
        #[test]
        fn analytic_threshold_matches_grid_scan(
            v in prop::collection::vec(-2.0f64..6.0, 3..60),
            alpha in 0.01f64..0.3,
        ) {
            let b = battery_from_scores(&v);
            let d = select_threshold(&b, alpha).unwrap();
            let t_max = search_upper_bound(b.q()).unwrap();
            let points = 20_000;
            let step = t_max / points as f64;
            match grid_scan(&b, alpha, points) {
                Some(t) => {
                    prop_assert!(d.exists);
                    prop_assert!(d.t_hat <= t + 1e-12, "analytic {} vs grid {}", d.t_hat, t);
                }
                None => prop_assert!(!d.exists || d.t_hat > t_max - step),
            }
            // no grid point below the analytic threshold is feasible
            for i in 0..=points {
                let t = step * i as f64;
                if t >= d.t_hat.min(t_max) {
                    break;
                }
                prop_assert!(fdp_hat(t, &b) > alpha);
            }
            if d.exists {
                prop_assert!(d.fdp_hat_at_t <= alpha * (1.0 + 1e-12));
                prop_assert!(d.t_hat >= 0.0 && d.t_hat <= t_max);
            } else {
                prop_assert_eq!(d.t_hat, fallback_threshold(b.q()));
            }
            prop_assert_eq!(d.rejected.len(), b.rejections_at(d.t_hat));
        }

        #[test]
        fn raising_a_score_never_shrinks_rejections(
            v in prop::collection::vec(-2.0f64..6.0, 3..40),
            idx in 0usize..40,
            bump in 0.0f64..3.0,
            alpha in 0.01f64..0.3,
        ) {
            let idx = idx % v.len();
            let before = select_threshold(&battery_from_scores(&v), alpha).unwrap();
            let mut raised = v.clone();
            raised[idx] += bump;
            let after = select_threshold(&battery_from_scores(&raised), alpha).unwrap();
            for pair in &before.rejected {
                prop_assert!(after.rejected.contains(pair));
            }
            prop_assert!(after.t_hat <= before.t_hat + 1e-12);
        }

        #[test]
        fn bh_contains_bonferroni(p in prop::collection::vec(0.0f64..1.0, 1..80), alpha in 0.01f64..0.5) {
            let b = battery_from_pvalues(&p);
            let bh = bh_procedure(&b, alpha).unwrap();
            for pair in bonferroni(&b, alpha).unwrap() {
                prop_assert!(bh.contains(&pair));
            }
        }
    }
}
