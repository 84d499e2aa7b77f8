//! Local linear reconstruction of curves from noisy discrete observations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covtest::CurvePanel;
use crate::error::{Error, Result};
use crate::quadrature::FunctionGrid;
use crate::scalar::Real;

/// Noisy discrete observations `(U_ijt, W_ijt)` for every subject and
/// variable. Lists may have different lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePanel {
    n: usize,
    p: usize,
    observations: Vec<Vec<(f64, f64)>>,
}

impl DiscretePanel {
    /// `observations[i * p + j]` holds the `(time, value)` list of subject
    /// `i`, variable `j`.
    pub fn new(n: usize, p: usize, observations: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        if observations.len() != n * p {
            return Err(Error::DimensionMismatch { expected: n * p, got: observations.len() });
        }
        for (idx, obs) in observations.iter().enumerate() {
            if let Some(&(u, _)) = obs.iter().find(|(u, _)| !(0.0..=1.0).contains(u)) {
                return Err(Error::invalid(format!(
                    "time {u} outside [0, 1] for subject {}, variable {}",
                    idx / p,
                    idx % p
                )));
            }
            if let Some(&(_, w)) = obs.iter().find(|(_, w)| !w.is_finite()) {
                return Err(Error::invalid(format!("non-finite value {w}")));
            }
        }
        Ok(Self { n, p, observations })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn observations(&self, i: usize, j: usize) -> &[(f64, f64)] {
        &self.observations[i * self.p + j]
    }

    /// Harmonic-mean sampling frequency `(n⁻¹ sum_i 1/T_ij)⁻¹` of variable `j`.
    /// Curves with no observations are skipped.
    pub fn harmonic_mean_frequency(&self, j: usize) -> f64 {
        let (sum, count) = (0..self.n)
            .map(|i| self.observations(i, j).len())
            .filter(|&t| t > 0)
            .fold((0.0, 0usize), |(s, c), t| (s + 1.0 / t as f64, c + 1));
        if count == 0 {
            0.0
        } else {
            count as f64 / sum
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    /// `c` in `h_j = c · T̄_j^{-1/5}`.
    pub bandwidth_constant: f64,
    /// Ridge added to the local normal equations, relative to their trace,
    /// when the local design is near singular.
    pub ridge: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self { bandwidth_constant: 1.0, ridge: 1e-8 }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_constant > 0.0) || !self.bandwidth_constant.is_finite() {
            return Err(Error::invalid(format!(
                "bandwidth constant must be positive, got {}",
                self.bandwidth_constant
            )));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::invalid(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        Ok(())
    }

    /// Bandwidth for a variable with harmonic-mean frequency `t_bar`.
    pub fn bandwidth(&self, t_bar: f64) -> f64 {
        self.bandwidth_constant * t_bar.powf(-0.2)
    }
}

/// Smoothed curve with a flag set when a degenerate-design fallback was used.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedCurve<T: Real> {
    pub values: Vec<T>,
    pub flagged: bool,
}

fn gaussian_weight(x: f64) -> f64 {
    // normalizing constant cancels in the local fit
    (-0.5 * x * x).exp()
}

/// Local linear fit with a Gaussian kernel, evaluated at every grid point.
pub fn local_linear_fit<T: Real>(
    times: &[f64],
    values: &[f64],
    bandwidth: f64,
    grid: &FunctionGrid<T>,
    ridge: f64,
) -> Result<FittedCurve<T>> {
    if times.len() != values.len() {
        return Err(Error::DimensionMismatch { expected: times.len(), got: values.len() });
    }
    if times.is_empty() {
        return Err(Error::NoData { subject: 0, variable: 0 });
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let first = times[0];
    if times.iter().all(|&u| u == first) {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        return Ok(FittedCurve { values: vec![T::from_f64_lossy(mean); grid.len()], flagged: true });
    }

    let mut flagged = false;
    let mut out = Vec::with_capacity(grid.len());
    for &u in grid.points() {
        let u = u.as_f64();
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in times.iter().zip(values) {
            let d = x - u;
            let w = gaussian_weight(d / bandwidth);
            s0 += w;
            s1 += w * d;
            t0 += w * y;
        }
        if !(s0 > f64::MIN_POSITIVE) {
            // every kernel weight underflowed: nearest observation
            let nearest = times
                .iter()
                .zip(values)
                .min_by(|a, b| (a.0 - u).abs().total_cmp(&(b.0 - u).abs()))
                .map(|(_, &y)| y)
                .unwrap_or(0.0);
            out.push(T::from_f64_lossy(nearest));
            flagged = true;
            continue;
        }
        // centered moments around the local weighted mean time
        let mean_d = s1 / s0;
        let mean_y = t0 / s0;
        for (&x, &y) in times.iter().zip(values) {
            let d = x - u;
            let w = gaussian_weight(d / bandwidth);
            let dc = d - mean_d;
            s2 += w * dc * dc;
            t1 += w * dc * (y - mean_y);
        }
        // normal equations in (intercept at mean_d, slope) are diag(s0, s2);
        // the uncentered matrix has the same determinant
        let raw_s2 = s2 + s0 * mean_d * mean_d;
        let trace = s0 + raw_s2;
        let slope = if s0 * s2 < 1e-12 * trace * trace {
            // ridge only on the slope so constants and shifts pass through
            flagged = true;
            let denom = s2 + ridge * trace;
            if denom > 0.0 {
                t1 / denom
            } else {
                0.0
            }
        } else {
            t1 / s2
        };
        let fit = mean_y - slope * mean_d;
        out.push(T::from_f64_lossy(fit));
    }
    Ok(FittedCurve { values: out, flagged })
}

/// Reconstructed panel plus the `(subject, variable)` curves that needed a
/// fallback.
#[derive(Debug, Clone)]
pub struct SmoothedPanel<T: Real> {
    pub panel: CurvePanel<T>,
    pub flagged: Vec<(usize, usize)>,
    pub bandwidths: Vec<f64>,
}

/// Applies [`local_linear_fit`] to every curve with the variable's common
/// bandwidth. The output is not centered.
pub fn smooth_panel<T: Real>(
    dp: &DiscretePanel,
    grid: &FunctionGrid<T>,
    cfg: &SmootherConfig,
) -> Result<SmoothedPanel<T>> {
    cfg.validate()?;
    let (n, p) = (dp.n(), dp.p());
    let bandwidths: Vec<f64> = (0..p)
        .map(|j| cfg.bandwidth(dp.harmonic_mean_frequency(j)))
        .collect();
    let fits: Vec<FittedCurve<T>> = (0..n * p)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / p, idx % p);
            let obs = dp.observations(i, j);
            if obs.is_empty() {
                return Err(Error::NoData { subject: i, variable: j });
            }
            let (times, values): (Vec<f64>, Vec<f64>) = obs.iter().copied().unzip();
            local_linear_fit(&times, &values, bandwidths[j], grid, cfg.ridge).map_err(|e| match e {
                Error::NoData { .. } => Error::NoData { subject: i, variable: j },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let mut flagged = Vec::new();
    let mut values = Vec::with_capacity(n * p * grid.len());
    for (idx, fit) in fits.into_iter().enumerate() {
        if fit.flagged {
            flagged.push((idx / p, idx % p));
        }
        values.extend(fit.values);
    }
    let panel = CurvePanel::new(grid.clone(), n, p, values)?;
    Ok(SmoothedPanel { panel, flagged, bandwidths })
}
