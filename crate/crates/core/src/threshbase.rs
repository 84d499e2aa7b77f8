//! Hard and soft functional thresholding of the sample cross-covariance
//! surfaces with a cross-validated threshold, used as baselines.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covtest::{all_pairs, compute_grams, hs_norm_sq_from_grams, CurvePanel, GramSet, Pair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThresholdMode {
    Hard,
    Soft,
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::Hard => "hard",
            ThresholdMode::Soft => "soft",
        })
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(ThresholdMode::Hard),
            "soft" => Ok(ThresholdMode::Soft),
            other => Err(Error::invalid(format!("unknown threshold mode {other:?}"))),
        }
    }
}

impl ThresholdMode {
    /// Multiplier applied to a surface of HS norm `norm`.
    pub fn factor(self, norm: f64, tau: f64) -> f64 {
        match self {
            ThresholdMode::Hard => {
                if norm >= tau {
                    1.0
                } else {
                    0.0
                }
            }
            ThresholdMode::Soft => {
                if norm > tau {
                    1.0 - tau / norm
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub mode: ThresholdMode,
    pub tau: f64,
    pub pairs: Vec<Pair>,
    /// `‖Σ̂_jk‖_S` for every entry of `pairs`.
    pub norms: Vec<f64>,
    /// Norms after thresholding.
    pub thresholded: Vec<f64>,
    pub adjacency: Vec<Pair>,
}

pub fn apply_threshold(pairs: &[Pair], norms: &[f64], tau: f64, mode: ThresholdMode) -> Result<ThresholdEstimate> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("threshold must be >= 0, got {tau}")));
    }
    if pairs.len() != norms.len() {
        return Err(Error::DimensionMismatch { expected: pairs.len(), got: norms.len() });
    }
    let thresholded: Vec<f64> = norms.iter().map(|&v| mode.factor(v, tau) * v).collect();
    let adjacency = pairs
        .iter()
        .zip(norms)
        .filter(|(_, &v)| mode.factor(v, tau) > 0.0)
        .map(|(&pr, _)| pr)
        .collect();
    Ok(ThresholdEstimate { mode, tau, pairs: pairs.to_vec(), norms: norms.to_vec(), thresholded, adjacency })
}

/// HS norms of every pair's cross-covariance surface, in `all_pairs` order.
pub fn pair_norms(grams: &GramSet<f64>) -> Vec<f64> {
    all_pairs(grams.p())
        .par_iter()
        .map(|&(j, k)| hs_norm_sq_from_grams(grams.matrix(j), grams.matrix(k)).max(0.0).sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub splits: usize,
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { splits: 5, grid_size: 30, seed: 0 }
    }
}

/// A half split of the subjects: `(train, test)`, both sorted.
pub type Split = (Vec<usize>, Vec<usize>);

/// Split `r` shuffles the subjects with seed `base + r` and keeps the first
/// `n / 2` for training.
pub fn make_splits(n: usize, count: usize, base: u64) -> Vec<Split> {
    (0..count as u64)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(base.wrapping_add(r));
            rng.set_stream(2);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (train, test) = idx.split_at(n / 2);
            let mut train = train.to_vec();
            let mut test = test.to_vec();
            train.sort_unstable();
            test.sort_unstable();
            (train, test)
        })
        .collect()
}

/// Inner products of one pair's train and test surfaces:
/// `‖Σ¹‖²`, `⟨Σ¹, Σ²⟩` and `‖Σ²‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMoments {
    pub train: f64,
    pub cross: f64,
    pub test: f64,
}

impl SplitMoments {
    /// From the full-sample Gram matrices of the two variables; each half is
    /// centered on its own mean.
    pub fn from_grams(a: &DMatrix<f64>, b: &DMatrix<f64>, split: &Split) -> Self {
        let (s1, s2) = split;
        let d1 = s1.len() as f64 - 1.0;
        let d2 = s2.len() as f64 - 1.0;
        let block = |g: &DMatrix<f64>, r: &[usize], c: &[usize]| centered_block(g, r, c);
        let train = block(a, s1, s1).dot(&block(b, s1, s1)) / (d1 * d1);
        let cross = block(a, s1, s2).dot(&block(b, s1, s2)) / (d1 * d2);
        let test = block(a, s2, s2).dot(&block(b, s2, s2)) / (d2 * d2);
        Self { train, cross, test }
    }

    /// `‖a Σ¹ - Σ²‖²` for the thresholding multiplier `a` at `tau`.
    pub fn loss(&self, mode: ThresholdMode, tau: f64) -> f64 {
        let a = mode.factor(self.train.max(0.0).sqrt(), tau);
        a * a * self.train - 2.0 * a * self.cross + self.test
    }
}

fn centered_block(g: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows.len(), cols.len(), |r, c| g[(rows[r], cols[c])]);
    let rm: Vec<f64> = m.row_iter().map(|r| r.mean()).collect();
    let cm: Vec<f64> = m.column_iter().map(|c| c.mean()).collect();
    let all = rm.iter().sum::<f64>() / rm.len() as f64;
    for c in 0..cols.len() {
        for r in 0..rows.len() {
            m[(r, c)] += all - rm[r] - cm[c];
        }
    }
    m
}

/// `size` equally spaced values from 0 to `max_norm`.
pub fn default_grid(max_norm: f64, size: usize) -> Vec<f64> {
    match size {
        0 => Vec::new(),
        1 => vec![max_norm],
        _ => (0..size).map(|k| max_norm * k as f64 / (size - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub tau: f64,
    pub grid: Vec<f64>,
    /// Average loss over splits for every grid value.
    pub scores: Vec<f64>,
}

/// Picks the grid value with the smallest split-averaged loss, summed over
/// pairs. `moments[q][h]` belongs to pair `q` and split `h`. Ties go to the
/// larger threshold.
pub fn cv_select(moments: &[Vec<SplitMoments>], mode: ThresholdMode, grid: &[f64]) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    if grid.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::invalid("thresholds must be >= 0"));
    }
    let splits = moments.first().map_or(0, Vec::len);
    if splits == 0 || moments.iter().any(|m| m.len() != splits) {
        return Err(Error::invalid("every pair needs the same nonzero number of splits"));
    }
    let scores: Vec<f64> = grid
        .iter()
        .map(|&tau| moments.iter().flatten().map(|m| m.loss(mode, tau)).sum::<f64>() / splits as f64)
        .collect();
    let mut best = 0;
    for i in 1..grid.len() {
        let better = scores[i] < scores[best] || (scores[i] == scores[best] && grid[i] > grid[best]);
        if better {
            best = i;
        }
    }
    Ok(CvOutcome { tau: grid[best], grid: grid.to_vec(), scores })
}

/// Split moments of every pair of a Gram set.
pub fn pair_moments(grams: &GramSet<f64>, splits: &[Split]) -> Vec<Vec<SplitMoments>> {
    all_pairs(grams.p())
        .par_iter()
        .map(|&(j, k)| splits.iter().map(|s| SplitMoments::from_grams(grams.matrix(j), grams.matrix(k), s)).collect())
        .collect()
}

/// Cross-validated threshold for the raw cross-covariance surfaces of a
/// panel. Uses [`default_grid`] when `grid` is `None`.
pub fn cv_threshold(panel: &CurvePanel<f64>, mode: ThresholdMode, config: &CvConfig, grid: Option<&[f64]>) -> Result<CvOutcome> {
    let grams = compute_grams(&panel.center()?)?;
    cv_threshold_grams(&grams, mode, config, grid)
}

pub fn cv_threshold_grams(grams: &GramSet<f64>, mode: ThresholdMode, config: &CvConfig, grid: Option<&[f64]>) -> Result<CvOutcome> {
    let summaries = PairSummaries::from_gram_set(grams, config)?;
    match grid {
        Some(g) => cv_select(&summaries.moments, mode, g),
        None => Ok(summaries.threshold(mode, config.grid_size)?.0),
    }
}

/// Full baseline on a panel: cross-validated threshold applied to the
/// full-sample norms.
pub fn threshold_panel(panel: &CurvePanel<f64>, mode: ThresholdMode, config: &CvConfig) -> Result<ThresholdEstimate> {
    let grams = compute_grams(&panel.center()?)?;
    let cv = cv_threshold_grams(&grams, mode, config, None)?;
    apply_threshold(&all_pairs(grams.p()), &pair_norms(&grams), cv.tau, mode)
}

/// Norms and split moments of a list of pair surfaces: everything the
/// cross-validation needs, computed once and shared by both modes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSummaries {
    pub pairs: Vec<Pair>,
    pub norms: Vec<f64>,
    /// `moments[q][h]` for pair `q` and split `h`.
    pub moments: Vec<Vec<SplitMoments>>,
}

fn check_cv(n: usize, config: &CvConfig) -> Result<()> {
    if n < 4 {
        return Err(Error::TooFewSubjects { required: 4, got: n });
    }
    if config.splits == 0 {
        return Err(Error::invalid("at least one split is required"));
    }
    Ok(())
}

impl PairSummaries {
    /// Raw cross-covariance surfaces of every pair of a Gram set.
    pub fn from_gram_set(grams: &GramSet<f64>, config: &CvConfig) -> Result<Self> {
        check_cv(grams.n(), config)?;
        let splits = make_splits(grams.n(), config.splits, config.seed);
        Ok(Self { pairs: all_pairs(grams.p()), norms: pair_norms(grams), moments: pair_moments(grams, &splits) })
    }

    /// Surfaces given by `grams(q)`, the `n × n` Gram matrices of the two
    /// curve sets of pair `q`, such as regression residuals. Each is built
    /// and dropped in turn.
    pub fn from_fn<F>(pairs: Vec<Pair>, n: usize, config: &CvConfig, grams: F) -> Result<Self>
    where
        F: Fn(usize) -> (DMatrix<f64>, DMatrix<f64>) + Sync,
    {
        check_cv(n, config)?;
        let splits = make_splits(n, config.splits, config.seed);
        let summaries: Vec<(f64, Vec<SplitMoments>)> = (0..pairs.len())
            .into_par_iter()
            .map(|q| {
                let (a, b) = grams(q);
                if a.shape() != (n, n) || b.shape() != (n, n) {
                    let got = if a.shape() != (n, n) { a.nrows() } else { b.nrows() };
                    return Err(Error::DimensionMismatch { expected: n, got });
                }
                let norm = hs_norm_sq_from_grams(&a, &b).max(0.0).sqrt();
                Ok((norm, splits.iter().map(|s| SplitMoments::from_grams(&a, &b, s)).collect()))
            })
            .collect::<Result<_>>()?;
        let (norms, moments) = summaries.into_iter().unzip();
        Ok(Self { pairs, norms, moments })
    }

    /// Cross-validates over [`default_grid`] up to the largest norm and
    /// applies the chosen threshold.
    pub fn threshold(&self, mode: ThresholdMode, grid_size: usize) -> Result<(CvOutcome, ThresholdEstimate)> {
        let grid = default_grid(self.norms.iter().copied().fold(0.0, f64::max), grid_size);
        let cv = cv_select(&self.moments, mode, &grid)?;
        let estimate = apply_threshold(&self.pairs, &self.norms, cv.tau, mode)?;
        Ok((cv, estimate))
    }
}

/// [`PairSummaries::from_fn`] followed by [`PairSummaries::threshold`] for
/// surfaces already held in memory.
pub fn threshold_gram_pairs(
    pairs: &[Pair],
    grams: &[(DMatrix<f64>, DMatrix<f64>)],
    mode: ThresholdMode,
    config: &CvConfig,
) -> Result<(CvOutcome, ThresholdEstimate)> {
    if pairs.len() != grams.len() {
        return Err(Error::DimensionMismatch { expected: pairs.len(), got: grams.len() });
    }
    let n = grams.first().map_or(0, |(a, _)| a.nrows());
    PairSummaries::from_fn(pairs.to_vec(), n, config, |q| grams[q].clone())?.threshold(mode, config.grid_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::FunctionGrid;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn noise_panel(n: usize, p: usize, seed: u64, strong: Option<(usize, usize, f64)>) -> CurvePanel<f64> {
        let grid: FunctionGrid<f64> = FunctionGrid::uniform(21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = grid.len();
        let mut values = vec![0.0; n * p * l];
        let z = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        for i in 0..n {
            let mut coefs: Vec<[f64; 2]> = (0..p).map(|_| [z(&mut rng), 0.5 * z(&mut rng)]).collect();
            if let Some((j, k, rho)) = strong {
                let shared = coefs[j];
                coefs[k] = [rho * shared[0] + (1.0 - rho * rho).sqrt() * coefs[k][0], coefs[k][1]];
            }
            for (j, c) in coefs.iter().enumerate() {
                for (t, &u) in grid.points().iter().enumerate() {
                    let u: f64 = u;
                    let f = c[0] * 2f64.sqrt() * (std::f64::consts::TAU * u).sin() + c[1] * 2f64.sqrt() * (std::f64::consts::TAU * u).cos();
                    values[(i * p + j) * l + t] = f;
                }
            }
        }
        CurvePanel::new(grid, n, p, values).unwrap()
    }

    #[test]
    fn zero_soft_threshold_keeps_everything() {
        let pairs = vec![(0, 1), (0, 2), (1, 2)];
        let norms = vec![0.5, 0.0, 2.0];
        let e = apply_threshold(&pairs, &norms, 0.0, ThresholdMode::Soft).unwrap();
        assert_eq!(e.adjacency, vec![(0, 1), (1, 2)]);
        assert_eq!(e.thresholded, norms);
        let e = apply_threshold(&pairs, &norms, 2.5, ThresholdMode::Hard).unwrap();
        assert!(e.adjacency.is_empty());
        let e = apply_threshold(&pairs, &norms, 2.0, ThresholdMode::Hard).unwrap();
        assert_eq!(e.adjacency, vec![(1, 2)]);
        assert_eq!(e.thresholded[2], 2.0);
        let e = apply_threshold(&pairs, &norms, 2.0, ThresholdMode::Soft).unwrap();
        assert!(e.adjacency.is_empty());
        assert!(matches!(apply_threshold(&pairs, &norms, -1.0, ThresholdMode::Soft), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_moments_match_explicit_surfaces() {
        let panel = noise_panel(12, 3, 5, Some((0, 2, 0.8)));
        let centered = panel.center().unwrap();
        let grams = compute_grams(&centered).unwrap();
        let split = &make_splits(12, 1, 9)[0];
        let m = SplitMoments::from_grams(grams.matrix(0), grams.matrix(2), split);
        let surface = |s: &[usize]| {
            let sub = panel.select_subjects(s).unwrap().center().unwrap();
            crate::covtest::cross_cov_surface(&sub, 0, 2).unwrap()
        };
        let (a, b) = (surface(&split.0), surface(&split.1));
        // HS inner product with product quadrature weights
        let w = panel.grid().weights();
        let inner = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            let mut acc = 0.0;
            for s in 0..w.len() {
                for t in 0..w.len() {
                    acc += w[s] * w[t] * x[(s, t)] * y[(s, t)];
                }
            }
            acc
        };
        assert_abs_diff_eq!(m.train, inner(&a, &a), epsilon = 1e-12);
        assert_abs_diff_eq!(m.cross, inner(&a, &b), epsilon = 1e-12);
        assert_abs_diff_eq!(m.test, inner(&b, &b), epsilon = 1e-12);
    }

    #[test]
    fn splits_are_disjoint_halves_and_seeded() {
        let s = make_splits(11, 3, 42);
        assert_eq!(s, make_splits(11, 3, 42));
        for (tr, te) in &s {
            assert_eq!(tr.len(), 5);
            assert_eq!(te.len(), 6);
            let mut all: Vec<usize> = tr.iter().chain(te).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..11).collect::<Vec<_>>());
        }
        assert_ne!(s[0], s[1]);
    }

    #[test]
    fn strong_pair_is_separated_from_noise() {
        for mode in [ThresholdMode::Hard, ThresholdMode::Soft] {
            let (mut noise, mut kept) = (0, 0);
            for run in 0..20u64 {
                let panel = noise_panel(100, 8, 100 + run, Some((2, 5, 0.95)));
                let cfg = CvConfig { seed: run, ..CvConfig::default() };
                let est = threshold_panel(&panel, mode, &cfg).unwrap();
                assert!(est.adjacency.contains(&(2, 5)), "{mode} run {run}");
                noise += est.pairs.len() - 1;
                kept += est.adjacency.len() - 1;
            }
            assert!(kept as f64 <= 0.1 * noise as f64, "{mode}: {kept} of {noise}");
        }
    }

    #[test]
    fn zero_grid_returns_zero_and_small_panels_fail() {
        let panel = noise_panel(10, 4, 1, None);
        let cv = cv_threshold(&panel, ThresholdMode::Hard, &CvConfig::default(), Some(&[0.0])).unwrap();
        assert_eq!(cv.tau, 0.0);
        let tiny = noise_panel(3, 4, 1, None);
        assert!(matches!(
            cv_threshold(&tiny, ThresholdMode::Soft, &CvConfig::default(), None),
            Err(Error::TooFewSubjects { required: 4, got: 3 })
        ));
    }

    #[test]
    fn cv_is_deterministic() {
        let panel = noise_panel(40, 5, 3, Some((0, 1, 0.7)));
        let cfg = CvConfig { seed: 77, ..CvConfig::default() };
        let a = cv_threshold(&panel, ThresholdMode::Soft, &cfg, None).unwrap();
        let b = cv_threshold(&panel, ThresholdMode::Soft, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid.len(), 30);
    }

    #[test]
    fn gram_pairs_agree_with_the_panel_route() {
        let panel = noise_panel(30, 4, 5, Some((1, 3, 0.8)));
        let cfg = CvConfig { seed: 3, ..CvConfig::default() };
        let grams = compute_grams(&panel.center().unwrap()).unwrap();
        let pairs = all_pairs(4);
        let surfaces: Vec<_> = pairs.iter().map(|&(j, k)| (grams.matrix(j).clone(), grams.matrix(k).clone())).collect();
        for mode in [ThresholdMode::Hard, ThresholdMode::Soft] {
            let (cv, est) = threshold_gram_pairs(&pairs, &surfaces, mode, &cfg).unwrap();
            assert_eq!(cv, cv_threshold(&panel, mode, &cfg, None).unwrap());
            assert_eq!(est, threshold_panel(&panel, mode, &cfg).unwrap());
        }
        assert!(matches!(
            threshold_gram_pairs(&pairs[..2], &surfaces, ThresholdMode::Hard, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ties_go_to_the_larger_threshold() {
        let m = vec![vec![SplitMoments { train: 0.0, cross: 0.0, test: 1.0 }]];
        let cv = cv_select(&m, ThresholdMode::Hard, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(cv.tau, 1.0);
    }

    proptest! {
        #[test]
        fn hard_adjacency_is_nested(norms in prop::collection::vec(0.0..5.0f64, 1..20), t1 in 0.0..5.0f64, t2 in 0.0..5.0f64) {
            let pairs: Vec<Pair> = (0..norms.len()).map(|i| (i, i + 1)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = apply_threshold(&pairs, &norms, lo, ThresholdMode::Hard).unwrap();
            let b = apply_threshold(&pairs, &norms, hi, ThresholdMode::Hard).unwrap();
            prop_assert!(b.adjacency.iter().all(|p| a.adjacency.contains(p)));
        }

        #[test]
        fn soft_norms_are_lipschitz(norm in 0.0..5.0f64, t1 in 0.0..6.0f64, t2 in 0.0..6.0f64) {
            let f = |t: f64| ThresholdMode::Soft.factor(norm, t) * norm;
            prop_assert!((f(t1) - f(t2)).abs() <= (t1 - t2).abs() + 1e-12);
            prop_assert_eq!(f(norm), 0.0);
        }
    }
}
