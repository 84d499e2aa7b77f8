//! Grids on `[0, 1]` and the quadrature behind every inner product and
//! Hilbert–Schmidt norm in the crate.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Tolerance on the total quadrature mass.
const MASS_TOL: f64 = 1e-12;

/// Evaluation points on `[0, 1]` with positive quadrature weights summing
/// to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionGrid<T: Real> {
    points: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> FunctionGrid<T> {
    /// Midpoint rule: `u_t = (t - 1/2) / L`, each weight `1/L`.
    pub fn uniform(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {len}")));
        }
        let l = len as f64;
        let points = (0..len)
            .map(|t| T::from_f64_lossy((t as f64 + 0.5) / l))
            .collect();
        let weights = vec![T::from_f64_lossy(1.0 / l); len];
        Ok(Self { points, weights })
    }

    /// Validating constructor for explicit points and weights.
    pub fn new(points: Vec<T>, weights: Vec<T>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: weights.len(),
            });
        }
        for (t, &u) in points.iter().enumerate() {
            if !(u >= T::zero() && u <= T::one()) {
                return Err(Error::InvalidGrid(format!("point {t} = {u} outside [0, 1]")));
            }
            if t > 0 && u <= points[t - 1] {
                return Err(Error::InvalidGrid(format!("points not strictly increasing at {t}")));
            }
        }
        if let Some(w) = weights.iter().find(|w| !(**w > T::zero())) {
            return Err(Error::InvalidGrid(format!("non-positive weight {w}")));
        }
        let mass: f64 = weights.iter().map(|w| w.as_f64()).sum();
        // single precision cannot represent 1/L exactly enough for 1e-12
        let tol = if T::epsilon().as_f64() > 1e-10 { 1e-5 } else { MASS_TOL };
        if (mass - 1.0).abs() > tol {
            return Err(Error::InvalidGrid(format!("weights sum to {mass}, expected 1")));
        }
        Ok(Self { points, weights })
    }

    /// Trapezoidal weights for user-supplied points. The first and last point
    /// must be the domain endpoints 0 and 1.
    pub fn trapezoidal(points: Vec<T>) -> Result<Self> {
        let l = points.len();
        if l < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {l}")));
        }
        let tol = T::from_f64_lossy(1e-12);
        if points[0].abs() > tol || (points[l - 1] - T::one()).abs() > tol {
            return Err(Error::InvalidGrid(
                "trapezoidal grids must start at 0 and end at 1".into(),
            ));
        }
        let half = T::from_f64_lossy(0.5);
        let weights = (0..l)
            .map(|t| {
                let left = if t == 0 { points[0] } else { points[t - 1] };
                let right = if t + 1 == l { points[l - 1] } else { points[t + 1] };
                (right - left) * half
            })
            .collect();
        Self::new(points, weights)
    }

    /// Cell weights for arbitrary increasing points: each point owns the
    /// interval between the midpoints to its neighbours, with the outer cells
    /// extended to 0 and 1. Reduces to the midpoint rule on a uniform grid.
    pub fn from_points(points: Vec<T>) -> Result<Self> {
        let l = points.len();
        if l < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {l}")));
        }
        let half = T::from_f64_lossy(0.5);
        let weights = (0..l)
            .map(|t| {
                let lo = if t == 0 { T::zero() } else { (points[t - 1] + points[t]) * half };
                let hi = if t + 1 == l { T::one() } else { (points[t] + points[t + 1]) * half };
                hi - lo
            })
            .collect();
        Self::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> FunctionGrid<U> {
        FunctionGrid {
            points: self.points.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
            weights: self.weights.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }

    /// `sum_t w_t f(u_t) g(u_t)`.
    pub fn inner_product(&self, f: &[T], g: &[T]) -> Result<T> {
        self.check_len(f.len())?;
        self.check_len(g.len())?;
        Ok(self.inner_product_unchecked(f, g))
    }

    pub(crate) fn inner_product_unchecked(&self, f: &[T], g: &[T]) -> T {
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .fold(T::zero(), |acc, (&w, (&a, &b))| acc + w * a * b)
    }

    /// Squared `L²` norm of a curve.
    pub fn norm_sq(&self, f: &[T]) -> Result<T> {
        self.inner_product(f, f)
    }

    /// Squared Hilbert–Schmidt norm `sum_{s,t} w_s w_t S[s,t]²` of a surface
    /// sampled on the product grid.
    pub fn hs_norm_sq(&self, surface: &DMatrix<T>) -> Result<T> {
        let l = self.len();
        if surface.nrows() != l {
            return Err(Error::DimensionMismatch { expected: l, got: surface.nrows() });
        }
        if surface.ncols() != l {
            return Err(Error::DimensionMismatch { expected: l, got: surface.ncols() });
        }
        let mut acc = T::zero();
        for t in 0..l {
            let wt = self.weights[t];
            let col = surface.column(t);
            let mut inner = T::zero();
            for s in 0..l {
                inner += self.weights[s] * col[s] * col[s];
            }
            acc += wt * inner;
        }
        Ok(acc)
    }

    /// Hilbert–Schmidt inner product of two surfaces on the product grid.
    pub fn hs_inner(&self, a: &DMatrix<T>, b: &DMatrix<T>) -> Result<T> {
        let l = self.len();
        for m in [a, b] {
            if m.nrows() != l || m.ncols() != l {
                return Err(Error::DimensionMismatch { expected: l, got: m.nrows().max(m.ncols()) });
            }
        }
        let mut acc = T::zero();
        for t in 0..l {
            for s in 0..l {
                acc += self.weights[s] * self.weights[t] * a[(s, t)] * b[(s, t)];
            }
        }
        Ok(acc)
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got });
        }
        Ok(())
    }

    /// Writes the sidecar format: header `point,weight`, then one
    /// comma-separated pair per line.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        writeln!(out, "point,weight").map_err(io)?;
        for (u, w) in self.points.iter().zip(&self.weights) {
            writeln!(out, "{},{}", u.as_f64(), w.as_f64()).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Reads a sidecar written by [`write_sidecar`](Self::write_sidecar).
    /// A header line is optional.
    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("point")) {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let mut fields = line.split(',');
            let (Some(u), Some(w), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err(format!("expected `point,weight`, got `{line}`")));
            };
            let u: f64 = u.trim().parse().map_err(|e| parse_err(format!("point: {e}")))?;
            let w: f64 = w.trim().parse().map_err(|e| parse_err(format!("weight: {e}")))?;
            points.push(T::from_f64_lossy(u));
            weights.push(T::from_f64_lossy(w));
        }
        Self::new(points, weights)
    }
}
