//! Tail probabilities for weighted sums of independent `χ²₁` variables,
//! approximated by a noncentral chi-square matched on four cumulants.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// P-values are clamped to `[PVALUE_FLOOR, 1 - PVALUE_FLOOR]` so that the
/// normal quantile transform stays finite.
pub const PVALUE_FLOOR: f64 = 1e-15;

/// Poisson mass left out of the noncentral series.
const SERIES_TAIL: f64 = 1e-13;

/// Power sums `c_r = sum_m λ_m^r`, r = 1..4, of the eigenvalues of the
/// estimated covariance operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cumulants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl Cumulants {
    pub fn new(c1: f64, c2: f64, c3: f64, c4: f64) -> Self {
        Self { c1, c2, c3, c4 }
    }

    /// Power sums of an explicit eigenvalue list.
    pub fn from_eigenvalues(eigenvalues: &[f64]) -> Self {
        let mut c = Self::new(0.0, 0.0, 0.0, 0.0);
        for &l in eigenvalues {
            let l2 = l * l;
            c.c1 += l;
            c.c2 += l2;
            c.c3 += l2 * l;
            c.c4 += l2 * l2;
        }
        c
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NullShape {
    /// Zero third cumulant: normal tail of the standardized statistic.
    Gaussian,
    NoncentralChiSq { dof: f64, ncp: f64 },
}

/// Fitted approximation to the null law of a test statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureNull {
    pub cumulants: Cumulants,
    pub mean: f64,
    pub sd: f64,
    pub shape: NullShape,
}

impl MixtureNull {
    /// Four-cumulant fit. With `s1 = c3 / c2^{3/2}` and `s2 = c4 / c2²`:
    /// if `s1² > s2`, `a = 1/(s1 - sqrt(s1² - s2))`, `δ = s1 a³ - a²`,
    /// `ℓ = a² - 2δ`; otherwise `δ = 0`, `ℓ = 1/s1²`.
    pub fn fit(c: Cumulants) -> Result<Self> {
        for (name, v) in [("c1", c.c1), ("c2", c.c2), ("c3", c.c3), ("c4", c.c4)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("cumulant {name} = {v} must be finite and >= 0")));
            }
        }
        if c.c2 == 0.0 {
            return Err(Error::DegenerateNull);
        }
        let mean = c.c1;
        let sd = (2.0 * c.c2).sqrt();
        if c.c3 == 0.0 {
            return Ok(Self { cumulants: c, mean, sd, shape: NullShape::Gaussian });
        }
        let s1 = c.c3 / c.c2.powf(1.5);
        let s2 = c.c4 / (c.c2 * c.c2);
        let disc = s1 * s1 - s2;
        let central = || (1.0 / (s1 * s1), 0.0);
        // Equal-eigenvalue inputs sit exactly on the boundary; roundoff must not
        // push them into the noncentral branch.
        let (dof, ncp) = if disc > 1e-12 * s2 {
            let a = 1.0 / (s1 - disc.sqrt());
            let ncp = s1 * a.powi(3) - a * a;
            let dof = a * a - 2.0 * ncp;
            if dof > 0.0 && ncp >= 0.0 {
                (dof, ncp)
            } else {
                central()
            }
        } else {
            central()
        };
        Ok(Self { cumulants: c, mean, sd, shape: NullShape::NoncentralChiSq { dof, ncp } })
    }

    /// `P(T0 >= t)` clamped to `[PVALUE_FLOOR, 1 - PVALUE_FLOOR]`.
    pub fn pvalue(&self, t: f64) -> Result<f64> {
        check_statistic(t)?;
        if t == 0.0 {
            return Ok(1.0 - PVALUE_FLOOR);
        }
        let z = (t - self.mean) / self.sd;
        let raw = match self.shape {
            NullShape::Gaussian => normal_sf(z),
            NullShape::NoncentralChiSq { dof, ncp } => {
                let x = z * (2.0 * (dof + 2.0 * ncp)).sqrt() + dof + ncp;
                noncentral_chisq_sf(x, dof, ncp)?
            }
        };
        Ok(clamp_pvalue(raw))
    }
}

fn check_statistic(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidStatistic(t));
    }
    Ok(())
}

pub fn clamp_pvalue(p: f64) -> f64 {
    p.clamp(PVALUE_FLOOR, 1.0 - PVALUE_FLOOR)
}

/// P-value of statistic `t` under the mixture with the given cumulants.
/// A degenerate null (`c2 = 0`) is a point mass at zero: any positive
/// statistic maps to the floor and a zero statistic to `1 - PVALUE_FLOOR`.
pub fn pvalue_from_cumulants(t: f64, c: Cumulants) -> Result<f64> {
    check_statistic(t)?;
    match MixtureNull::fit(c) {
        Ok(null) => null.pvalue(t),
        Err(Error::DegenerateNull) => {
            Ok(if t > 0.0 { PVALUE_FLOOR } else { 1.0 - PVALUE_FLOOR })
        }
        Err(e) => Err(e),
    }
}

/// Survival function of the central chi-square with `dof` degrees of freedom.
pub fn chisq_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma_ur(0.5 * dof, 0.5 * x)
    }
}

/// Survival function of the noncentral chi-square, as a Poisson(`ncp/2`)
/// mixture of central survivals summed outward from the Poisson mode until
/// the omitted mass drops below `1e-13`.
pub fn noncentral_chisq_sf(x: f64, dof: f64, ncp: f64) -> Result<f64> {
    if !x.is_finite() || !dof.is_finite() || !ncp.is_finite() {
        return Err(Error::invalid(format!(
            "noncentral chi-square needs finite inputs (x = {x}, dof = {dof}, ncp = {ncp})"
        )));
    }
    if !(dof > 0.0) || !(ncp >= 0.0) {
        return Err(Error::invalid(format!("need dof > 0 and ncp >= 0, got {dof}, {ncp}")));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    if ncp == 0.0 {
        return Ok(chisq_sf(x, dof));
    }
    let lambda = 0.5 * ncp;
    let half_dof = 0.5 * dof;
    let mode = lambda.floor();
    let w_mode = (-lambda + mode * lambda.ln() - ln_gamma(mode + 1.0)).exp();

    let mut sum = w_mode * chisq_sf(x, dof + 2.0 * mode);
    let mut mass = w_mode;

    let mut w = w_mode;
    let mut k = mode;
    while k > 0.0 {
        w *= k / lambda;
        k -= 1.0;
        sum += w * gamma_ur(half_dof + k, 0.5 * x);
        mass += w;
        if w < 1e-300 {
            break;
        }
    }

    let mut w = w_mode;
    let mut k = mode;
    let max_k = mode + 1000.0 + 100.0 * lambda.sqrt();
    while 1.0 - mass >= SERIES_TAIL && k < max_k {
        k += 1.0;
        w *= lambda / k;
        sum += w * gamma_ur(half_dof + k, 0.5 * x);
        mass += w;
    }
    Ok(sum.clamp(0.0, 1.0))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal upper tail `1 - Φ(z)`, accurate far into the tail.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// Newton steps on the upper tail so that normal_sf(z) == q to rounding.
fn polish_upper(mut z: f64, q: f64) -> f64 {
    for _ in 0..3 {
        let d = normal_pdf(z);
        if !z.is_finite() || d < f64::MIN_POSITIVE {
            break;
        }
        let step = (normal_sf(z) - q) / d;
        z += step;
        if step.abs() <= 1e-15 * z.abs().max(1.0) {
            break;
        }
    }
    z
}

/// `Φ⁻¹(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else if p < 0.5 {
        -normal_upper_quantile(p)
    } else {
        normal_upper_quantile(1.0 - p)
    }
}

/// `Φ⁻¹(1 - q)` computed without forming `1 - q`.
pub fn normal_upper_quantile(q: f64) -> f64 {
    if q <= 0.0 {
        f64::INFINITY
    } else if q >= 1.0 {
        f64::NEG_INFINITY
    } else {
        polish_upper(std::f64::consts::SQRT_2 * erfc_inv(2.0 * q), q)
    }
}

/// `V = Φ⁻¹(1 - pv)` for a clamped p-value.
pub fn normal_quantile_transform(pv: f64) -> Result<f64> {
    // a hair of slack for values that were clamped in another precision
    let slack = 1e-18;
    if !(pv >= PVALUE_FLOOR - slack && pv <= 1.0 - PVALUE_FLOOR + slack) {
        return Err(Error::invalid(format!("p-value {pv} outside the clamped range")));
    }
    Ok(normal_upper_quantile(pv))
}
