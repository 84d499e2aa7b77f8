//! Curve panels, per-variable Gram matrices, sample cross-covariance
//! surfaces, Hilbert–Schmidt test statistics and the cumulants of the
//! estimated asymptotic covariance operator.
//!
//! Everything pairwise is computed from the `n × n` Gram matrices
//! `A_j[i, i'] = <X̃_ij, X̃_i'j>`, which are built once per panel. The
//! `L² × L²` covariance operator of a cross-covariance estimate is never
//! materialized: its nonzero spectrum coincides with that of an `n × n`
//! matrix derived from `A_j ∘ A_k`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nulldist::{normal_quantile_transform, pvalue_from_cumulants, Cumulants};
use crate::quadrature::FunctionGrid;
use crate::scalar::Real;

/// Unordered variable pair `(j, k)` with `j < k`, zero-based.
pub type Pair = (usize, usize);

/// Roundoff allowance for cumulants of a PSD matrix.
const CUMULANT_CLAMP: f64 = 1e-10;

/// `n` subjects × `p` functional variables, each curve sampled on a shared
/// grid of length `L`. Stored subject-major: `values[(i * p + j) * L + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePanel<T: Real> {
    n: usize,
    p: usize,
    grid: FunctionGrid<T>,
    values: Vec<T>,
    centered: bool,
}

impl<T: Real> CurvePanel<T> {
    pub fn new(grid: FunctionGrid<T>, n: usize, p: usize, values: Vec<T>) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewSubjects { required: 2, got: n });
        }
        if p < 1 {
            return Err(Error::invalid("panel needs at least one variable"));
        }
        let expected = n * p * grid.len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: values.len() });
        }
        Ok(Self { n, p, grid, values, centered: false })
    }

    pub fn from_fn(
        grid: FunctionGrid<T>,
        n: usize,
        p: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let l = grid.len();
        let mut values = Vec::with_capacity(n * p * l);
        for i in 0..n {
            for j in 0..p {
                for t in 0..l {
                    values.push(f(i, j, t));
                }
            }
        }
        Self::new(grid, n, p, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Grid length `L`.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grid(&self) -> &FunctionGrid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn curve(&self, i: usize, j: usize) -> &[T] {
        let l = self.len();
        let start = (i * self.p + j) * l;
        &self.values[start..start + l]
    }

    pub fn curve_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let l = self.len();
        let start = (i * self.p + j) * l;
        self.centered = false;
        &mut self.values[start..start + l]
    }

    /// `n × L` matrix of variable `j`'s curves.
    pub fn variable_matrix(&self, j: usize) -> DMatrix<T> {
        DMatrix::from_fn(self.n, self.len(), |i, t| self.curve(i, j)[t])
    }

    /// Subject-mean curve of variable `j`.
    pub fn mean_curve(&self, j: usize) -> Vec<T> {
        let l = self.len();
        let mut mean = vec![T::zero(); l];
        for i in 0..self.n {
            for (m, &x) in mean.iter_mut().zip(self.curve(i, j)) {
                *m += x;
            }
        }
        let inv = T::one() / T::from_usize_lossy(self.n);
        mean.iter_mut().for_each(|m| *m = *m * inv);
        mean
    }

    /// Subtracts the per-variable subject-mean curve. Idempotent.
    pub fn center(&self) -> Result<Self> {
        if self.n < 2 {
            return Err(Error::TooFewSubjects { required: 2, got: self.n });
        }
        if self.centered {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        for j in 0..self.p {
            let mean = self.mean_curve(j);
            for i in 0..self.n {
                for (x, m) in out.curve_mut(i, j).iter_mut().zip(&mean) {
                    *x = *x - *m;
                }
            }
        }
        out.centered = true;
        Ok(out)
    }

    /// Panel restricted to the listed subjects, in the given order.
    pub fn select_subjects(&self, subjects: &[usize]) -> Result<Self> {
        let l = self.len();
        let mut values = Vec::with_capacity(subjects.len() * self.p * l);
        for &i in subjects {
            if i >= self.n {
                return Err(Error::IndexError { index: i, len: self.n });
            }
            let start = i * self.p * l;
            values.extend_from_slice(&self.values[start..start + self.p * l]);
        }
        Self::new(self.grid.clone(), subjects.len(), self.p, values)
    }

    /// Converts to another scalar type. The centered flag is kept.
    pub fn cast<U: Real>(&self) -> CurvePanel<U> {
        CurvePanel {
            n: self.n,
            p: self.p,
            grid: self.grid.cast(),
            values: self.values.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
            centered: self.centered,
        }
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.p {
            return Err(Error::IndexError { index: j, len: self.p });
        }
        Ok(())
    }
}

/// Per-variable Gram matrices of a centered panel.
#[derive(Debug, Clone)]
pub struct GramSet<T: Real> {
    n: usize,
    matrices: Vec<DMatrix<T>>,
}

impl<T: Real> GramSet<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrix(&self, j: usize) -> &DMatrix<T> {
        &self.matrices[j]
    }

    pub fn matrices(&self) -> &[DMatrix<T>] {
        &self.matrices
    }

    fn check_pair(&self, j: usize, k: usize) -> Result<()> {
        for idx in [j, k] {
            if idx >= self.p() {
                return Err(Error::IndexError { index: idx, len: self.p() });
            }
        }
        if j == k {
            return Err(Error::InvalidPair(j, k));
        }
        Ok(())
    }
}

/// Gram matrix `A[i, i'] = sum_t w_t x_i(u_t) x_i'(u_t)` of the rows of an
/// `n × L` curve matrix. Exactly symmetric.
pub fn gram_matrix<T: Real>(curves: &DMatrix<T>, grid: &FunctionGrid<T>) -> DMatrix<T> {
    let mut weighted = curves.clone();
    for (t, &w) in grid.weights().iter().enumerate() {
        let s = w.sqrt();
        weighted.column_mut(t).iter_mut().for_each(|x| *x = *x * s);
    }
    let mut gram = &weighted * weighted.transpose();
    symmetrize(&mut gram);
    gram
}

fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    for i in 0..n {
        for k in (i + 1)..n {
            m[(k, i)] = m[(i, k)];
        }
    }
}

/// Gram matrices for every variable of a centered panel.
pub fn compute_grams<T: Real>(panel: &CurvePanel<T>) -> Result<GramSet<T>> {
    if !panel.is_centered() {
        return Err(Error::NotCentered);
    }
    let matrices = (0..panel.p())
        .into_par_iter()
        .map(|j| gram_matrix(&panel.variable_matrix(j), panel.grid()))
        .collect();
    Ok(GramSet { n: panel.n(), matrices })
}

/// Sample cross-covariance surface `Σ̂_jk[s, t] = (n-1)⁻¹ sum_i X̃_ij(u_s) X̃_ik(u_t)`.
pub fn cross_cov_surface<T: Real>(panel: &CurvePanel<T>, j: usize, k: usize) -> Result<DMatrix<T>> {
    panel.check_index(j)?;
    panel.check_index(k)?;
    if !panel.is_centered() {
        return Err(Error::NotCentered);
    }
    let xj = panel.variable_matrix(j);
    let xk = panel.variable_matrix(k);
    let scale = T::one() / T::from_usize_lossy(panel.n() - 1);
    Ok(xj.transpose() * xk * scale)
}

/// `T_n,jk = n ‖Σ̂_jk‖²_S`, computed as `n/(n-1)² · sum A_j ∘ A_k`.
pub fn pair_statistic<T: Real>(grams: &GramSet<T>, j: usize, k: usize) -> Result<T> {
    grams.check_pair(j, k)?;
    Ok(statistic_from_grams(grams.matrix(j), grams.matrix(k)))
}

/// Squared Hilbert–Schmidt norm of the cross-covariance surface.
pub fn hs_norm_sq_from_grams<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let n = T::from_usize_lossy(a.nrows());
    let nm1 = n - T::one();
    a.dot(b) / (nm1 * nm1)
}

pub(crate) fn statistic_from_grams<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    T::from_usize_lossy(a.nrows()) * hs_norm_sq_from_grams(a, b)
}

/// Power sums of the eigenvalues of the estimated covariance operator of
/// `√n Σ̂_jk`.
pub fn gamma_cumulants<T: Real>(grams: &GramSet<T>, j: usize, k: usize) -> Result<Cumulants> {
    grams.check_pair(j, k)?;
    if grams.n() < 3 {
        return Err(Error::TooFewSubjects { required: 3, got: grams.n() });
    }
    cumulants_from_grams(grams.matrix(j), grams.matrix(k))
}

/// Builds `M = Gram of {X̃_ij ⊗ X̃_ik - Σ̂_jk}_i` from `H = A ∘ B` and returns
/// `trace((M/n)^r)` for r = 1..4.
pub fn cumulants_from_grams<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<Cumulants> {
    let n = a.nrows();
    if b.nrows() != n || a.ncols() != n || b.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.nrows() });
    }
    let mut m = DMatrix::<f64>::from_fn(n, n, |i, k| a[(i, k)].as_f64() * b[(i, k)].as_f64());
    let row_sums: Vec<f64> = m.row_iter().map(|r| r.sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let inv = 1.0 / (n as f64 - 1.0);
    let corner = total * inv * inv;
    for k in 0..n {
        for i in 0..n {
            m[(i, k)] += corner - (row_sums[i] + row_sums[k]) * inv;
        }
    }
    cumulants_of_gram(&m)
}

/// `trace((M/n)^r)`, r = 1..4, for a symmetric PSD `n × n` matrix.
pub(crate) fn cumulants_of_gram(m: &DMatrix<f64>) -> Result<Cumulants> {
    let n = m.nrows() as f64;
    let m2 = m * m;
    let raw = [
        m.trace() / n,
        m.norm_squared() / (n * n),
        m.dot(&m2) / (n * n * n),
        m2.norm_squared() / (n * n * n * n),
    ];
    let mut c = [0.0; 4];
    for (r, (&v, slot)) in raw.iter().zip(c.iter_mut()).enumerate() {
        if !v.is_finite() || v < -CUMULANT_CLAMP {
            return Err(Error::NumericalDegeneracy(format!("cumulant c{} = {v}", r + 1)));
        }
        *slot = v.max(0.0);
    }
    Ok(Cumulants::new(c[0], c[1], c[2], c[3]))
}

/// Outcome of one pairwise Hilbert–Schmidt test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTestRecord {
    pub j: usize,
    pub k: usize,
    pub statistic: f64,
    pub cumulants: Cumulants,
    pub pvalue: f64,
    pub v: f64,
}

impl PairTestRecord {
    pub fn pair(&self) -> Pair {
        (self.j, self.k)
    }
}

/// Full test record for two curve sets given their centered Gram matrices.
pub fn test_from_grams<T: Real>(j: usize, k: usize, a: &DMatrix<T>, b: &DMatrix<T>) -> Result<PairTestRecord> {
    let statistic = statistic_from_grams(a, b).as_f64().max(0.0);
    let cumulants = cumulants_from_grams(a, b)?;
    let pvalue = pvalue_from_cumulants(statistic, cumulants)?;
    let v = normal_quantile_transform(pvalue)?;
    Ok(PairTestRecord { j, k, statistic, cumulants, pvalue, v })
}

/// All `j < k` pairs of `p` variables in lexicographic order.
pub fn all_pairs(p: usize) -> Vec<Pair> {
    (0..p).flat_map(|j| ((j + 1)..p).map(move |k| (j, k))).collect()
}

/// Tests every pair of a panel, in lexicographic `(j, k)` order. Centers the
/// panel first if needed.
pub fn all_pair_records<T: Real>(panel: &CurvePanel<T>) -> Result<Vec<PairTestRecord>> {
    if panel.n() < 3 {
        return Err(Error::TooFewSubjects { required: 3, got: panel.n() });
    }
    if panel.p() < 2 {
        return Err(Error::invalid("pairwise testing needs at least two variables"));
    }
    let centered = panel.center()?;
    let grams = compute_grams(&centered)?;
    records_from_grams(&grams)
}

pub fn records_from_grams<T: Real>(grams: &GramSet<T>) -> Result<Vec<PairTestRecord>> {
    all_pairs(grams.p())
        .into_par_iter()
        .map(|(j, k)| test_from_grams(j, k, grams.matrix(j), grams.matrix(k)))
        .collect()
}
