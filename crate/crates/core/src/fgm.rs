//! Functional graphical model: FPCA, nodewise standardized group lasso,
//! residual cross-covariance testing and global tuning.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covtest::{all_pairs, compute_grams, gram_matrix, test_from_grams, CurvePanel, GramSet, Pair, PairTestRecord};
use crate::error::{Error, Result};
use crate::nulldist::{normal_sf, normal_upper_quantile};
use crate::quadrature::FunctionGrid;

/// Default proportion of variance explained by the retained components.
pub const DEFAULT_PVE: f64 = 0.95;

/// Eigen-decomposition of one variable's marginal covariance.
#[derive(Debug, Clone)]
pub struct VariableBasis {
    /// All eigenvalues, descending, clamped at 0.
    pub eigenvalues: Vec<f64>,
    pub d: usize,
    /// `L × d`, orthonormal under the grid inner product.
    pub eigenfunctions: DMatrix<f64>,
    /// `n × d`, `ξ_im = ⟨Y_ij, φ_jm⟩`.
    pub scores: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FpcaBasis {
    pub n: usize,
    pub variables: Vec<VariableBasis>,
}

impl FpcaBasis {
    pub fn p(&self) -> usize {
        self.variables.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.variables.iter().map(|v| v.d).collect()
    }
}

/// Smallest `d` whose leading eigenvalues explain at least `pve` of the total.
pub fn truncation(eigenvalues: &[f64], pve: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    for (idx, &w) in eigenvalues.iter().enumerate() {
        acc += w;
        if acc >= pve * total * (1.0 - 1e-12) {
            return idx + 1;
        }
    }
    eigenvalues.len()
}

fn variable_fpca(x: &DMatrix<f64>, grid: &FunctionGrid<f64>, pve: f64, j: usize) -> Result<VariableBasis> {
    let (n, l) = x.shape();
    let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let mut xw = x.clone();
    for (t, &s) in sw.iter().enumerate() {
        xw.column_mut(t).scale_mut(s);
    }
    let mut s = xw.transpose() * &xw / (n as f64 - 1.0);
    for a in 0..l {
        for b in a + 1..l {
            let v = 0.5 * (s[(a, b)] + s[(b, a)]);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&m| eig.eigenvalues[m].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateVariable(j));
    }
    let d = truncation(&eigenvalues, pve);
    let eigenfunctions = DMatrix::from_fn(l, d, |t, m| {
        let v = eig.eigenvectors[(t, order[m])];
        v / sw[t]
    });
    // fix the sign so that the largest loading is positive
    let mut eigenfunctions = eigenfunctions;
    for m in 0..d {
        let col = eigenfunctions.column(m);
        let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        if pivot < 0.0 {
            eigenfunctions.column_mut(m).neg_mut();
        }
    }
    let mut weighted = x.clone();
    for (t, &w) in grid.weights().iter().enumerate() {
        weighted.column_mut(t).scale_mut(w);
    }
    let scores = weighted * &eigenfunctions;
    debug_assert_eq!(scores.nrows(), n);
    Ok(VariableBasis { eigenvalues, d, eigenfunctions, scores })
}

/// Per-variable functional principal components of a panel (centered first
/// if needed). `d_j` is the smallest truncation reaching `pve`.
pub fn fpca(panel: &CurvePanel<f64>, pve: f64) -> Result<FpcaBasis> {
    if panel.n() < 3 {
        return Err(Error::TooFewSubjects { required: 3, got: panel.n() });
    }
    if !(pve > 0.0 && pve <= 1.0) {
        return Err(Error::invalid(format!("pve must lie in (0, 1], got {pve}")));
    }
    let centered = panel.center()?;
    let variables = (0..panel.p())
        .into_par_iter()
        .map(|j| variable_fpca(&centered.variable_matrix(j), centered.grid(), pve, j))
        .collect::<Result<_>>()?;
    Ok(FpcaBasis { n: panel.n(), variables })
}

/// Standardized score design shared by every nodewise regression of a panel.
///
/// Each block is whitened, `W_ℓ = V_ℓ Q_ℓ⁻¹` with `Q_ℓ = (V_ℓᵀ V_ℓ / n)^{1/2}`,
/// so that `W_ℓᵀ W_ℓ = n I`.
#[derive(Debug, Clone)]
pub struct ScoreDesign {
    n: usize,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    whitened: DMatrix<f64>,
    q: Vec<DMatrix<f64>>,
    q_inv: Vec<DMatrix<f64>>,
    /// `WᵀW / n` over all blocks.
    cross: DMatrix<f64>,
    scales: Vec<f64>,
    /// Blocks whose `Q` needed the eigenvalue floor.
    pub flagged: Vec<usize>,
}

const Q_FLOOR: f64 = 1e-10;

impl ScoreDesign {
    pub fn new(basis: &FpcaBasis) -> Self {
        let n = basis.n;
        let dims = basis.dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &d in &dims {
            offsets.push(total);
            total += d;
        }
        let mut whitened = DMatrix::zeros(n, total);
        let mut q = Vec::with_capacity(dims.len());
        let mut q_inv = Vec::with_capacity(dims.len());
        let mut flagged = Vec::new();
        for (l, var) in basis.variables.iter().enumerate() {
            let v = &var.scores;
            let eig = SymmetricEigen::new(v.transpose() * v / n as f64);
            if eig.eigenvalues.iter().any(|&e| e < Q_FLOOR) {
                flagged.push(l);
            }
            let root = eig.eigenvalues.map(|e| e.max(Q_FLOOR).sqrt());
            let u = &eig.eigenvectors;
            let ql = u * DMatrix::from_diagonal(&root) * u.transpose();
            let qi = u * DMatrix::from_diagonal(&root.map(|r| 1.0 / r)) * u.transpose();
            whitened.columns_mut(offsets[l], dims[l]).copy_from(&(v * &qi));
            q.push(ql);
            q_inv.push(qi);
        }
        let cross = whitened.transpose() * &whitened / n as f64;
        let scales = basis.variables.iter().map(|v| v.scores.norm() / (n as f64).sqrt()).collect();
        Self { n, dims, offsets, whitened, q, q_inv, cross, scales, flagged }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.dims.len()
    }

    fn total(&self) -> usize {
        self.whitened.ncols()
    }

    /// `W_ℓᵀ V_j / n` for every block `ℓ`.
    fn target_cross(&self, j: usize) -> DMatrix<f64> {
        self.cross.columns(self.offsets[j], self.dims[j]) * &self.q[j]
    }

    /// Root mean square of the retained scores of `j`, `‖V_j‖_F / √n`.
    pub fn target_scale(&self, j: usize) -> f64 {
        self.scales[j]
    }

    /// Smallest `τ` at which every regression with target `j` is zero.
    pub fn tau_max_for(&self, j: usize) -> f64 {
        if self.p() < 3 {
            return 0.0;
        }
        let sqrt_n = (self.n as f64).sqrt();
        let x = self.target_cross(j);
        (0..self.p())
            .filter(|&l| l != j)
            .map(|l| sqrt_n * x.rows(self.offsets[l], self.dims[l]).norm())
            .fold(0.0, f64::max)
    }

    /// Smallest scale-free `τ` (see [`FgmContext`]) at which every
    /// regression of the panel is zero.
    pub fn tau_max(&self) -> f64 {
        (0..self.p())
            .map(|j| {
                let s = self.target_scale(j);
                if s > 0.0 {
                    self.tau_max_for(j) / s
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

/// `count` log-spaced values from `τ_max` down to `τ_max / ratio`.
/// A ratio below one is read as its reciprocal.
pub fn tau_grid(design: &ScoreDesign, count: usize, ratio: f64) -> Vec<f64> {
    let top = design.tau_max();
    let ratio = if ratio < 1.0 { ratio.recip() } else { ratio };
    if count == 0 || !(top > 0.0) {
        return vec![0.0];
    }
    if count == 1 {
        return vec![top];
    }
    let step = ratio.ln() / (count - 1) as f64;
    (0..count).map(|i| top * (-(i as f64) * step).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoControl {
    /// Relative objective decrease below which sweeping stops.
    pub tolerance: f64,
    /// Optimality-condition violation (see [`GroupLassoFit::kkt_violation`])
    /// below which sweeping stops.
    pub kkt_tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for LassoControl {
    fn default() -> Self {
        Self { tolerance: 1e-8, kkt_tolerance: 1e-2, max_sweeps: 500 }
    }
}

const MM_STEPS: usize = 2;
const MM_TOLERANCE: f64 = 1e-10;

/// `½ bᵀ G b - bᵀ h + w Σ ‖b_ℓ‖` over the active rows, with `b` an
/// `m × cols` matrix and the norm taken over each block of rows.
struct ActiveProblem {
    gram: DMatrix<f64>,
    linear: DMatrix<f64>,
    weight: f64,
    /// `(first row, rows)` of each active block.
    spans: Vec<(usize, usize)>,
}

impl ActiveProblem {
    /// Majorize-minimize from `b`: each step solves
    /// `(G + diag(w / ‖b_ℓ‖)) b = h`, which never increases the value.
    /// `None` if a block collapses or the system is singular, in which case
    /// the sweeps carry on alone.
    fn minimize(&self, mut b: DMatrix<f64>) -> Option<DMatrix<f64>> {
        for _ in 0..MM_STEPS {
            let mut h = self.gram.clone();
            for &(at, d) in &self.spans {
                let eta = b.rows(at, d).norm();
                if !(eta > 0.0) {
                    return None;
                }
                for r in at..at + d {
                    h[(r, r)] += self.weight / eta;
                }
            }
            let next = h.cholesky()?.solve(&self.linear);
            let change = (&next - &b).norm();
            b = next;
            if change <= MM_TOLERANCE * b.norm() {
                break;
            }
        }
        Some(b)
    }
}

/// Regression of variable `j` on every variable except `j` and `k`.
#[derive(Debug, Clone)]
pub struct GroupLassoFit {
    pub j: usize,
    pub k: usize,
    pub tau: f64,
    /// Whitened coefficients `B = Q Ψ`, all blocks stacked (`D × d_j`); rows
    /// of blocks `j` and `k` stay zero.
    b: DMatrix<f64>,
    /// `C B` with `C = WᵀW / n`.
    cb: DMatrix<f64>,
    x: DMatrix<f64>,
    target_sq: f64,
    pub objective: f64,
    pub sweeps: usize,
    /// Objective after each sweep, starting with the initial value.
    pub trace: Vec<f64>,
}

impl GroupLassoFit {
    /// Zero fit, ready to be solved or warm-started.
    pub fn new(design: &ScoreDesign, basis: &FpcaBasis, j: usize, k: usize) -> Result<Self> {
        let p = design.p();
        for idx in [j, k] {
            if idx >= p {
                return Err(Error::IndexError { index: idx, len: p });
            }
        }
        if j == k {
            return Err(Error::InvalidPair(j, k));
        }
        let dj = design.dims[j];
        let target_sq = basis.variables[j].scores.norm_squared();
        let x = design.target_cross(j);
        let b = DMatrix::zeros(design.total(), dj);
        let cb = DMatrix::zeros(design.total(), dj);
        let mut fit = Self { j, k, tau: 0.0, b, cb, x, target_sq, objective: 0.0, sweeps: 0, trace: Vec::new() };
        fit.objective = fit.evaluate(design);
        Ok(fit)
    }

    fn predictors<'a>(&self, design: &'a ScoreDesign) -> impl Iterator<Item = usize> + 'a {
        let (j, k) = (self.j, self.k);
        (0..design.p()).filter(move |&l| l != j && l != k)
    }

    fn block_norm(&self, design: &ScoreDesign, l: usize) -> f64 {
        self.b.rows(design.offsets[l], design.dims[l]).norm()
    }

    fn evaluate(&self, design: &ScoreDesign) -> f64 {
        let n = design.n as f64;
        let penalty: f64 = self.predictors(design).map(|l| self.block_norm(design, l)).sum();
        0.5 * self.target_sq - n * self.x.dot(&self.b) + 0.5 * n * self.b.dot(&self.cb) + self.tau * n.sqrt() * penalty
    }

    /// Block coordinate descent at `tau`, starting from the current blocks.
    /// Each sweep is followed by majorize-minimize steps on the active
    /// blocks, which solve the smooth part exactly and so do not stall when
    /// predictors are nearly collinear.
    pub fn solve(&mut self, design: &ScoreDesign, tau: f64, control: &LassoControl) -> Result<()> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("tau must be >= 0, got {tau}")));
        }
        self.tau = tau;
        let mut prev = self.evaluate(design);
        self.trace = vec![prev];
        self.sweeps = 0;
        let blocks: Vec<usize> = self.predictors(design).collect();
        for _ in 0..control.max_sweeps {
            self.sweeps += 1;
            self.sweep(design, &blocks);
            self.polish(design, &blocks);
            let obj = self.evaluate(design);
            self.trace.push(obj);
            let decrease = prev - obj;
            prev = obj;
            if decrease <= control.tolerance * obj.abs().max(f64::MIN_POSITIVE) || self.kkt_violation(design) <= control.kkt_tolerance {
                break;
            }
        }
        self.objective = prev;
        Ok(())
    }

    fn sweep(&mut self, design: &ScoreDesign, blocks: &[usize]) {
        let sqrt_n = (design.n as f64).sqrt();
        let tau = self.tau;
        for &l in blocks {
            let (off, dl) = (design.offsets[l], design.dims[l]);
            let c_ll = design.cross.view((off, off), (dl, dl));
            let b_l = self.b.rows(off, dl).clone_owned();
            let g = self.x.rows(off, dl) - self.cb.rows(off, dl) + c_ll * &b_l;
            let norm = g.norm();
            let new = if norm * sqrt_n > tau { g * (1.0 - tau / (sqrt_n * norm)) } else { DMatrix::zeros(dl, b_l.ncols()) };
            let delta = &new - &b_l;
            if delta.iter().any(|&v| v != 0.0) {
                self.cb += design.cross.columns(off, dl) * &delta;
                self.b.rows_mut(off, dl).copy_from(&new);
            }
        }
    }

    /// Majorize-minimize steps on the active blocks. These solve the smooth
    /// part exactly and so keep converging when predictors are nearly
    /// collinear, where plain sweeps stall.
    fn polish(&mut self, design: &ScoreDesign, blocks: &[usize]) {
        let active: Vec<usize> = blocks.iter().copied().filter(|&l| self.block_norm(design, l) > 0.0).collect();
        if active.is_empty() {
            return;
        }
        let rows: Vec<usize> = active.iter().flat_map(|&l| design.offsets[l]..design.offsets[l] + design.dims[l]).collect();
        let spans: Vec<(usize, usize)> = {
            let mut at = 0;
            active
                .iter()
                .map(|&l| {
                    let span = (at, design.dims[l]);
                    at += design.dims[l];
                    span
                })
                .collect()
        };
        let problem = ActiveProblem {
            gram: DMatrix::from_fn(rows.len(), rows.len(), |a, b| design.n as f64 * design.cross[(rows[a], rows[b])]),
            linear: DMatrix::from_fn(rows.len(), self.b.ncols(), |a, c| design.n as f64 * self.x[(rows[a], c)]),
            weight: self.tau * (design.n as f64).sqrt(),
            spans,
        };
        let start = DMatrix::from_fn(rows.len(), self.b.ncols(), |a, c| self.b[(rows[a], c)]);
        let Some(current) = problem.minimize(start) else { return };
        for (a, &r) in rows.iter().enumerate() {
            self.b.row_mut(r).copy_from(&current.row(a));
        }
        self.cb = design.cross.select_columns(&rows) * &current;
    }

    /// Largest violation of the optimality conditions over the predictor
    /// blocks, in units of the penalty gradient `τ√n`: zero at the exact
    /// minimizer.
    pub fn kkt_violation(&self, design: &ScoreDesign) -> f64 {
        let sqrt_n = (design.n as f64).sqrt();
        let scale = if self.tau > 0.0 { self.tau } else { 1.0 };
        self.predictors(design)
            .map(|l| {
                let (off, dl) = (design.offsets[l], design.dims[l]);
                let grad = (self.x.rows(off, dl) - self.cb.rows(off, dl)) * sqrt_n;
                let norm = self.block_norm(design, l);
                if norm > 0.0 {
                    (grad - self.b.rows(off, dl) * (self.tau / norm)).norm()
                } else {
                    (grad.norm() - self.tau).max(0.0)
                }
            })
            .fold(0.0, f64::max)
            / scale
    }

    /// `Ψ_ℓ = Q_ℓ⁻¹ B_ℓ` for every predictor block.
    pub fn blocks(&self, design: &ScoreDesign) -> Vec<(usize, DMatrix<f64>)> {
        self.predictors(design)
            .map(|l| (l, &design.q_inv[l] * self.b.rows(design.offsets[l], design.dims[l])))
            .collect()
    }

    pub fn active_set(&self, design: &ScoreDesign) -> Vec<usize> {
        self.predictors(design).filter(|&l| self.block_norm(design, l) > 0.0).collect()
    }

    /// Fitted scores `Σ_ℓ V_ℓ Ψ_ℓ` (`n × d_j`).
    pub fn fitted_scores(&self, design: &ScoreDesign) -> DMatrix<f64> {
        &design.whitened * &self.b
    }
}

pub fn standardized_group_lasso(
    basis: &FpcaBasis,
    design: &ScoreDesign,
    j: usize,
    k: usize,
    tau: f64,
    control: &LassoControl,
) -> Result<GroupLassoFit> {
    let mut fit = GroupLassoFit::new(design, basis, j, k)?;
    fit.solve(design, tau, control)?;
    Ok(fit)
}

/// Functional residuals of both nodewise regressions of a pair.
#[derive(Debug, Clone)]
pub struct ResidualPair {
    pub pair: Pair,
    /// `n × L` residuals of `j` regressed on the rest.
    pub jk: DMatrix<f64>,
    /// `n × L` residuals of `k` regressed on the rest.
    pub kj: DMatrix<f64>,
}

fn fitted_curves(basis: &FpcaBasis, design: &ScoreDesign, fit: &GroupLassoFit) -> DMatrix<f64> {
    fit.fitted_scores(design) * basis.variables[fit.j].eigenfunctions.transpose()
}

/// Residual curves `Y_ij - φ_jᵀ Σ_ℓ Ψ_ℓᵀ ξ_iℓ` of both directions. `panel`
/// must be the centered panel the basis came from.
pub fn residual_pair(
    basis: &FpcaBasis,
    design: &ScoreDesign,
    panel: &CurvePanel<f64>,
    fit_jk: Option<&GroupLassoFit>,
    fit_kj: Option<&GroupLassoFit>,
) -> Result<ResidualPair> {
    let (fjk, fkj) = match (fit_jk, fit_kj) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::PipelineOrderError("both directional fits are required".into())),
    };
    if (fjk.j, fjk.k) != (fkj.k, fkj.j) {
        return Err(Error::invalid(format!(
            "fits ({}, {}) and ({}, {}) are not the two directions of one pair",
            fjk.j, fjk.k, fkj.j, fkj.k
        )));
    }
    let jk = panel.variable_matrix(fjk.j) - fitted_curves(basis, design, fjk);
    let kj = panel.variable_matrix(fkj.j) - fitted_curves(basis, design, fkj);
    Ok(ResidualPair { pair: (fjk.j, fjk.k), jk, kj })
}

/// Gram matrix of the residuals, `A_j - ξ Fᵀ - F ξᵀ + F Fᵀ`, where `ξ` are
/// the scores of `j` and `F` the fitted scores.
pub fn residual_gram(a: &DMatrix<f64>, scores: &DMatrix<f64>, fitted: &DMatrix<f64>) -> DMatrix<f64> {
    let cross = scores * fitted.transpose();
    let mut e = a - &cross - cross.transpose() + fitted * fitted.transpose();
    double_center(&mut e);
    e
}

fn double_center(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let row: Vec<f64> = m.row_iter().map(|r| r.sum() / n as f64).collect();
    let total = row.iter().sum::<f64>() / n as f64;
    for k in 0..n {
        for i in 0..n {
            m[(i, k)] += total - row[i] - row[k];
        }
    }
    for i in 0..n {
        for k in i + 1..n {
            let v = 0.5 * (m[(i, k)] + m[(k, i)]);
            m[(i, k)] = v;
            m[(k, i)] = v;
        }
    }
}

const MAX_SCALE_ITERATIONS: usize = 100;
const SCALE_TOLERANCE: f64 = 1e-3;

/// Everything a battery needs: the basis, the whitened design and the
/// Gram matrices of the centered panel.
///
/// `tau` arguments here are scale-free: the regression with target `j` is
/// penalized in units of its own residual scale (as in the scaled lasso),
/// so that one value regularizes every target alike even when variances
/// differ by orders of magnitude.
#[derive(Debug, Clone)]

pub struct FgmContext {
    pub basis: FpcaBasis,
    pub design: ScoreDesign,
    pub grams: GramSet<f64>,
    pub control: LassoControl,
}

impl FgmContext {
    pub fn new(panel: &CurvePanel<f64>, pve: f64) -> Result<Self> {
        if panel.p() < 2 {
            return Err(Error::invalid("pairwise testing needs at least two variables"));
        }
        let basis = fpca(panel, pve)?;
        let design = ScoreDesign::new(&basis);
        let grams = compute_grams(&panel.center()?)?;
        Ok(Self { basis, design, grams, control: LassoControl::default() })
    }

    /// Solves `fit` at the scale-free `tau`: the penalty is `tau · σ` with
    /// `σ = ‖V_j - fit‖_F / √n` iterated to a fixed point, starting from the
    /// current fit (or the target scale for a zero fit).
    pub fn solve(&self, fit: &mut GroupLassoFit, tau: f64) -> Result<()> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("tau must be >= 0, got {tau}")));
        }
        let floor = 1e-12 * self.design.target_scale(fit.j);
        let mut sigma = self.noise_scale(fit).max(floor);
        // fixed point of σ = f(σ), secant steps with plain iteration as fallback
        let mut last: Option<(f64, f64)> = None;
        for _ in 0..MAX_SCALE_ITERATIONS {
            fit.solve(&self.design, tau * sigma, &self.control)?;
            let value = self.noise_scale(fit).max(floor);
            let gap = value - sigma;
            if gap.abs() <= SCALE_TOLERANCE * sigma {
                break;
            }
            let mut next = value;
            if let Some((s0, g0)) = last {
                if g0 != gap {
                    let secant = sigma - gap * (sigma - s0) / (gap - g0);
                    if secant.is_finite() && secant > floor {
                        next = secant;
                    }
                }
            }
            last = Some((sigma, gap));
            sigma = next;
        }
        Ok(())
    }

    /// Root mean square residual of the retained scores of `fit.j`.
    pub fn noise_scale(&self, fit: &GroupLassoFit) -> f64 {
        let scores = &self.basis.variables[fit.j].scores;
        (scores - fit.fitted_scores(&self.design)).norm() / (self.design.n as f64).sqrt()
    }

    fn residual_gram_of(&self, fit: &GroupLassoFit) -> DMatrix<f64> {
        residual_gram(self.grams.matrix(fit.j), &self.basis.variables[fit.j].scores, &fit.fitted_scores(&self.design))
    }

    fn pair_record(&self, fjk: &GroupLassoFit, fkj: &GroupLassoFit) -> Result<PairTestRecord> {
        test_from_grams(fjk.j, fjk.k, &self.residual_gram_of(fjk), &self.residual_gram_of(fkj))
    }

    /// Both residual Gram matrices of a pair, for the thresholding baselines.
    pub fn residual_grams(&self, fjk: &GroupLassoFit, fkj: &GroupLassoFit) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.residual_gram_of(fjk), self.residual_gram_of(fkj))
    }

    fn fresh_fits(&self, pair: Pair) -> Result<(GroupLassoFit, GroupLassoFit)> {
        let (j, k) = pair;
        Ok((GroupLassoFit::new(&self.design, &self.basis, j, k)?, GroupLassoFit::new(&self.design, &self.basis, k, j)?))
    }

    /// Fits of both directions of every pair at `tau`, from zero.
    pub fn fits_at(&self, tau: f64) -> Result<Vec<(GroupLassoFit, GroupLassoFit)>> {
        all_pairs(self.design.p())
            .into_par_iter()
            .map(|pair| {
                let (mut a, mut b) = self.fresh_fits(pair)?;
                self.solve(&mut a, tau)?;
                self.solve(&mut b, tau)?;
                Ok((a, b))
            })
            .collect()
    }

    pub fn records_for(&self, fits: &[(GroupLassoFit, GroupLassoFit)]) -> Result<Vec<PairTestRecord>> {
        fits.par_iter().map(|(a, b)| self.pair_record(a, b)).collect()
    }
}

/// Residual test records for every pair at a fixed `tau`.
pub fn fgm_battery(ctx: &FgmContext, tau: f64) -> Result<Vec<PairTestRecord>> {
    let fits = ctx.fits_at(tau)?;
    ctx.records_for(&fits)
}

/// Tuning criterion: squared relative gaps between observed and expected
/// exceedance counts at ten cut levels in the upper tail.
pub fn tau_criterion(scores: &[f64], p: usize) -> f64 {
    let q = scores.len() as f64;
    let base = normal_sf(((p as f64).ln().max(0.0)).sqrt());
    (1..=10)
        .map(|l| {
            let tail = l as f64 * base / 10.0;
            let cut = normal_upper_quantile(tail);
            let count = scores.iter().filter(|&&v| v >= cut).count() as f64;
            let ratio = count / (q * tail) - 1.0;
            ratio * ratio
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct TauSelection {
    pub tau: f64,
    pub taus: Vec<f64>,
    pub criteria: Vec<f64>,
    /// Records at the chosen `tau`.
    pub records: Vec<PairTestRecord>,
    /// Fits at the chosen `tau`, one pair of directions per pair.
    pub fits: Vec<(GroupLassoFit, GroupLassoFit)>,
    /// Pairs whose active sets grew as `tau` increased along the path.
    pub path_violations: usize,
}

/// Runs the whole `tau` path (descending, warm-started) and returns the
/// minimizer of [`tau_criterion`]. Ties go to the larger `tau`.
pub fn select_tau(ctx: &FgmContext, tau_grid: &[f64]) -> Result<TauSelection> {
    if tau_grid.is_empty() {
        return Err(Error::invalid("empty tau grid"));
    }
    if tau_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::invalid("tau values must be finite and >= 0"));
    }
    let mut taus = tau_grid.to_vec();
    taus.sort_by(|a, b| b.total_cmp(a));
    let p = ctx.design.p();
    let pairs = all_pairs(p);
    let mut state: Vec<(GroupLassoFit, GroupLassoFit)> = pairs.iter().map(|&pair| ctx.fresh_fits(pair)).collect::<Result<_>>()?;
    let mut prev_active: Vec<usize> = vec![0; pairs.len()];
    let mut violations = 0;
    let mut criteria = Vec::with_capacity(taus.len());
    let mut best: Option<(usize, f64, Vec<PairTestRecord>, Vec<(GroupLassoFit, GroupLassoFit)>)> = None;
    for (step, &tau) in taus.iter().enumerate() {
        let records: Vec<PairTestRecord> = state
            .par_iter_mut()
            .map(|(a, b)| {
                ctx.solve(a, tau)?;
                ctx.solve(b, tau)?;
                ctx.pair_record(a, b)
            })
            .collect::<Result<_>>()?;
        for (slot, (a, b)) in prev_active.iter_mut().zip(&state) {
            let size = a.active_set(&ctx.design).len() + b.active_set(&ctx.design).len();
            if step > 0 && size < *slot {
                violations += 1;
            }
            *slot = size;
        }
        let scores: Vec<f64> = records.iter().map(|r| r.v).collect();
        let crit = tau_criterion(&scores, p);
        criteria.push(crit);
        // strict improvement needed, so ties stay with the larger tau seen first
        if best.as_ref().is_none_or(|b| crit < b.1) {
            best = Some((step, crit, records, state.clone()));
        }
    }
    let (idx, _, records, fits) = best.expect("nonempty grid");
    Ok(TauSelection { tau: taus[idx], taus, criteria, records, fits, path_violations: violations })
}

/// Builds the default grid and selects `tau` for a panel in one call.
pub fn fgm_select(panel: &CurvePanel<f64>, pve: f64, grid_size: usize, ratio: f64) -> Result<(FgmContext, TauSelection)> {
    let ctx = FgmContext::new(panel, pve)?;
    let grid = tau_grid(&ctx.design, grid_size, ratio);
    let sel = select_tau(&ctx, &grid)?;
    Ok((ctx, sel))
}

/// Gram of curves on a grid, exposed for the residual oracle in tests.
pub fn curve_gram(curves: &DMatrix<f64>, grid: &FunctionGrid<f64>) -> DMatrix<f64> {
    gram_matrix(curves, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{
        design_rng, gen_dag_design, replication_rng, sample_cov_panel, sample_dag_panel, Model,
    };
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(l: usize) -> FunctionGrid<f64> {
        FunctionGrid::uniform(l).unwrap()
    }

    fn independent_panel(n: usize, p: usize, seed: u64) -> CurvePanel<f64> {
        sample_cov_panel(&DMatrix::identity(p, p), n, &grid(31), &mut replication_rng(seed, 0)).unwrap()
    }

    #[test]
    fn truncation_rule() {
        assert_eq!(truncation(&[0.9, 0.06, 0.04], 0.95), 2);
        assert_eq!(truncation(&[1.0, 0.0], 0.95), 1);
        assert_eq!(truncation(&[0.5, 0.5], 1.0), 2);
    }

    #[test]
    fn fpca_recovers_delta() {
        let panel = independent_panel(400, 2, 3);
        let basis = fpca(&panel, 0.95).unwrap();
        let g = grid(31);
        for var in &basis.variables {
            for m in 0..3 {
                let target = 1.0 / ((m + 1) * (m + 1)) as f64;
                assert!((var.eigenvalues[m] / target - 1.0).abs() < 0.15, "m = {m}: {}", var.eigenvalues[m]);
            }
            // orthonormal eigenfunctions
            for a in 0..var.d {
                for b in 0..var.d {
                    let fa: Vec<f64> = var.eigenfunctions.column(a).iter().copied().collect();
                    let fb: Vec<f64> = var.eigenfunctions.column(b).iter().copied().collect();
                    let target = if a == b { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(g.inner_product(&fa, &fb).unwrap(), target, epsilon = 1e-8);
                }
            }
            // score variance equals the eigenvalue
            let s = var.scores.column(0);
            let var0 = s.norm_squared() / 399.0;
            assert_abs_diff_eq!(var0, var.eigenvalues[0], epsilon = 1e-8);
        }
    }

    #[test]
    fn fpca_scores_are_quadrature_inner_products() {
        let panel = independent_panel(20, 3, 5);
        let centered = panel.center().unwrap();
        let basis = fpca(&panel, 0.99).unwrap();
        let g = centered.grid();
        for (j, var) in basis.variables.iter().enumerate() {
            for i in 0..20 {
                for m in 0..var.d {
                    let phi: Vec<f64> = var.eigenfunctions.column(m).iter().copied().collect();
                    let direct = g.inner_product(centered.curve(i, j), &phi).unwrap();
                    assert_abs_diff_eq!(var.scores[(i, m)], direct, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn reconstruction_error_falls_with_d() {
        let panel = independent_panel(30, 1, 8);
        let centered = panel.center().unwrap();
        let basis = fpca(&panel, 1.0).unwrap();
        let var = &basis.variables[0];
        let x = centered.variable_matrix(0);
        let mut last = f64::INFINITY;
        for d in 0..=var.d {
            let approx = var.scores.columns(0, d) * var.eigenfunctions.columns(0, d).transpose();
            let err = gram_matrix(&(&x - approx), centered.grid()).trace();
            assert!(err <= last + 1e-10);
            last = err;
        }
    }

    #[test]
    fn zero_variable_is_degenerate() {
        let g = grid(11);
        let panel = CurvePanel::from_fn(g, 5, 2, |i, j, t| if j == 1 { 3.0 } else { (i * t) as f64 }).unwrap();
        assert!(matches!(fpca(&panel, 0.95), Err(Error::DegenerateVariable(1))));
    }

    fn small_context(seed: u64) -> FgmContext {
        let mut rng = design_rng(seed);
        let design = gen_dag_design(Model::Dag3, 5, &mut rng).unwrap();
        let panel = sample_dag_panel(&design, 120, &grid(31), &mut replication_rng(seed, 0)).unwrap();
        FgmContext::new(&panel, 0.95).unwrap()
    }

    #[test]
    fn whitened_blocks_are_orthonormal() {
        let ctx = small_context(1);
        let d = &ctx.design;
        for l in 0..d.p() {
            let block = d.cross.view((d.offsets[l], d.offsets[l]), (d.dims[l], d.dims[l]));
            assert!((block - DMatrix::identity(d.dims[l], d.dims[l])).abs().max() < 1e-10);
        }
    }

    #[test]
    fn above_tau_max_everything_is_zero() {
        let ctx = small_context(2);
        for j in 0..5 {
            let top = ctx.design.tau_max_for(j);
            let others: Vec<usize> = (0..5).filter(|&k| k != j).collect();
            for &k in &others {
                let fit = standardized_group_lasso(&ctx.basis, &ctx.design, j, k, top * 1.0001, &ctx.control).unwrap();
                assert!(fit.active_set(&ctx.design).is_empty());
            }
            // just below, the maximizing block enters for some excluded partner
            let entered: usize = others
                .iter()
                .map(|&k| {
                    standardized_group_lasso(&ctx.basis, &ctx.design, j, k, top * 0.999, &ctx.control)
                        .unwrap()
                        .active_set(&ctx.design)
                        .len()
                })
                .sum();
            assert!(entered > 0, "target {j}");
        }
        // scale-free version through the context
        let mut fit = GroupLassoFit::new(&ctx.design, &ctx.basis, 2, 0).unwrap();
        ctx.solve(&mut fit, ctx.design.tau_max() * 1.0001).unwrap();
        assert!(fit.active_set(&ctx.design).is_empty());
    }

    #[test]
    fn zero_tau_is_least_squares() {
        let ctx = small_context(3);
        let control = LassoControl { tolerance: 1e-14, kkt_tolerance: 0.0, max_sweeps: 5000 };
        let fit = standardized_group_lasso(&ctx.basis, &ctx.design, 2, 0, 0.0, &control).unwrap();
        let resid = &ctx.basis.variables[2].scores - fit.fitted_scores(&ctx.design);
        let scale = ctx.basis.variables[2].scores.norm();
        for l in [1, 3, 4] {
            let grad = ctx.basis.variables[l].scores.transpose() * &resid;
            assert!(grad.norm() / scale < 1e-6 * ctx.basis.n as f64, "block {l}: {}", grad.norm());
        }
        // independent normal-equations oracle
        let v: Vec<&DMatrix<f64>> = [1, 3, 4].iter().map(|&l| &ctx.basis.variables[l].scores).collect();
        let cols: usize = v.iter().map(|m| m.ncols()).sum();
        let mut x = DMatrix::zeros(ctx.basis.n, cols);
        let mut off = 0;
        for m in &v {
            x.columns_mut(off, m.ncols()).copy_from(m);
            off += m.ncols();
        }
        let y = &ctx.basis.variables[2].scores;
        let coef = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
        let ols = &x * coef;
        assert!((ols - fit.fitted_scores(&ctx.design)).abs().max() < 1e-6);
    }

    #[test]
    fn objective_matches_definition_and_descends() {
        let ctx = small_context(4);
        let tau = 0.3 * ctx.design.tau_max_for(3);
        let fit = standardized_group_lasso(&ctx.basis, &ctx.design, 3, 1, tau, &ctx.control).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        let y = &ctx.basis.variables[3].scores;
        let mut fitted = DMatrix::zeros(y.nrows(), y.ncols());
        let mut penalty = 0.0;
        for (l, psi) in fit.blocks(&ctx.design) {
            let vp = &ctx.basis.variables[l].scores * psi;
            penalty += vp.norm();
            fitted += vp;
        }
        let direct = 0.5 * (y - fitted).norm_squared() + tau * penalty;
        assert!((direct - fit.objective).abs() <= 1e-8 * direct.abs());
        assert!(!fit.active_set(&ctx.design).is_empty());
        for l in [0, 2, 4] {
            if !fit.active_set(&ctx.design).contains(&l) {
                assert_eq!(fit.blocks(&ctx.design).iter().find(|b| b.0 == l).unwrap().1.norm(), 0.0);
            }
        }
    }

    #[test]
    fn residual_identities() {
        let ctx = small_context(5);
        let mut rng = design_rng(5);
        let design = gen_dag_design(Model::Dag3, 5, &mut rng).unwrap();
        let panel = sample_dag_panel(&design, 120, &grid(31), &mut replication_rng(5, 0)).unwrap().center().unwrap();
        let tau = 0.2 * ctx.design.tau_max_for(1);
        let a = standardized_group_lasso(&ctx.basis, &ctx.design, 1, 3, tau, &ctx.control).unwrap();
        let b = standardized_group_lasso(&ctx.basis, &ctx.design, 3, 1, tau, &ctx.control).unwrap();
        let res = residual_pair(&ctx.basis, &ctx.design, &panel, Some(&a), Some(&b)).unwrap();
        let fitted = fitted_curves(&ctx.basis, &ctx.design, &a);
        assert!((&res.jk + &fitted - panel.variable_matrix(1)).abs().max() < 1e-12);

        // explicit double quadrature of ∫ Y(v) β(u, v) dv
        let g = panel.grid();
        let phi_j = &ctx.basis.variables[1].eigenfunctions;
        for i in [0, 17, 119] {
            for t in [0, 15, 30] {
                let mut direct = 0.0;
                for (l, psi) in a.blocks(&ctx.design) {
                    let phi_l = &ctx.basis.variables[l].eigenfunctions;
                    for s in 0..g.len() {
                        // β(u_t, v_s) = φ_l(v_s)ᵀ Ψ φ_j(u_t)
                        let beta = (phi_l.row(s) * &psi * phi_j.row(t).transpose())[(0, 0)];
                        direct += g.weights()[s] * panel.curve(i, l)[s] * beta;
                    }
                }
                assert!((direct - fitted[(i, t)]).abs() < 1e-8, "i = {i}, t = {t}");
            }
        }

        // Gram route equals the Gram of the explicit residual curves
        let e = residual_gram(ctx.grams.matrix(1), &ctx.basis.variables[1].scores, &a.fitted_scores(&ctx.design));
        let direct = curve_gram(&res.jk, g);
        assert!((e - direct).abs().max() < 1e-9);

        assert!(matches!(
            residual_pair(&ctx.basis, &ctx.design, &panel, Some(&a), None),
            Err(Error::PipelineOrderError(_))
        ));
    }

    #[test]
    fn zero_fits_leave_curves_untouched() {
        let ctx = small_context(6);
        let panel = {
            let mut rng = design_rng(6);
            let design = gen_dag_design(Model::Dag3, 5, &mut rng).unwrap();
            sample_dag_panel(&design, 120, &grid(31), &mut replication_rng(6, 0)).unwrap().center().unwrap()
        };
        let a = GroupLassoFit::new(&ctx.design, &ctx.basis, 0, 4).unwrap();
        let b = GroupLassoFit::new(&ctx.design, &ctx.basis, 4, 0).unwrap();
        let res = residual_pair(&ctx.basis, &ctx.design, &panel, Some(&a), Some(&b)).unwrap();
        assert_eq!(res.jk, panel.variable_matrix(0));
        assert_eq!(res.kj, panel.variable_matrix(4));
    }

    #[test]
    fn chain_edges_rank_on_top() {
        let mut rng = design_rng(10);
        let design = gen_dag_design(Model::Dag3, 5, &mut rng).unwrap();
        let panel = sample_dag_panel(&design, 400, &grid(31), &mut replication_rng(10, 0)).unwrap();
        let (_, sel) = fgm_select(&panel, 0.95, 20, 100.0).unwrap();
        let mut ranked: Vec<&PairTestRecord> = sel.records.iter().collect();
        ranked.sort_by(|a, b| b.v.total_cmp(&a.v));
        let h1 = &design.truth.h1;
        let top: Vec<Pair> = ranked.iter().take(h1.len()).map(|r| r.pair()).collect();
        for edge in h1 {
            assert!(top.contains(edge), "{edge:?} not in {top:?}");
        }
    }

    #[test]
    fn subject_permutation_leaves_battery_unchanged() {
        let mut rng = design_rng(12);
        let design = gen_dag_design(Model::Dag3, 4, &mut rng).unwrap();
        let panel = sample_dag_panel(&design, 60, &grid(21), &mut replication_rng(12, 0)).unwrap();
        let mut perm: Vec<usize> = (0..60).collect();
        perm.reverse();
        perm.swap(3, 40);
        let shuffled = panel.select_subjects(&perm).unwrap();
        let a = FgmContext::new(&panel, 0.95).unwrap();
        let b = FgmContext::new(&shuffled, 0.95).unwrap();
        let tau = 0.2 * a.design.tau_max();
        assert_abs_diff_eq!(a.design.tau_max(), b.design.tau_max(), epsilon = 1e-9 * a.design.tau_max());
        let ra = fgm_battery(&a, tau).unwrap();
        let rb = fgm_battery(&b, tau).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            assert!((x.statistic - y.statistic).abs() <= 1e-6 * x.statistic.max(1e-12));
            assert!((x.v - y.v).abs() <= 1e-5);
        }
    }

    #[test]
    fn independent_variables_are_calibrated() {
        let mut rejections = 0;
        let mut total = 0;
        let cut = normal_upper_quantile(0.05);
        for r in 0..200 {
            let panel = sample_cov_panel(&DMatrix::identity(3, 3), 100, &grid(21), &mut replication_rng(77, r)).unwrap();
            let ctx = FgmContext::new(&panel, 0.95).unwrap();
            let tau = 0.5 * ctx.design.tau_max();
            for rec in fgm_battery(&ctx, tau).unwrap() {
                total += 1;
                if rec.v >= cut {
                    rejections += 1;
                }
            }
        }
        let rate = rejections as f64 / total as f64;
        assert!(rate <= 0.09, "rate {rate}");
    }

    #[test]
    fn criterion_oracle_and_selection() {
        // double-entry: recompute the criterion from the stored V scores
        let ctx = small_context(7);
        let grid = tau_grid(&ctx.design, 5, 100.0);
        let sel = select_tau(&ctx, &grid).unwrap();
        let p = 5.0f64;
        let g = 1.0 - crate::nulldist::normal_cdf(p.ln().sqrt());
        let scores: Vec<f64> = sel.records.iter().map(|r| r.v).collect();
        let mut crit = 0.0;
        for l in 1..=10 {
            let level = l as f64 * g / 10.0;
            let cut = crate::nulldist::normal_quantile(1.0 - level);
            let c = scores.iter().filter(|&&v| v >= cut).count() as f64;
            crit += (c / (10.0 * level) - 1.0).powi(2);
        }
        let chosen = sel.taus.iter().position(|&t| t == sel.tau).unwrap();
        assert!((crit - sel.criteria[chosen]).abs() < 1e-10 * crit.max(1.0));
        assert!(sel.criteria.iter().all(|&c| c >= sel.criteria[chosen]));
        // singleton grid
        let single = select_tau(&ctx, &[grid[2]]).unwrap();
        assert_eq!(single.tau, grid[2]);
        assert!(select_tau(&ctx, &[]).is_err());
    }

    #[test]
    fn exact_match_wins_with_zero_criterion() {
        // build scores whose exceedance counts equal Q * level at every cut
        let p = 30;
        let g = normal_sf((p as f64).ln().sqrt());
        let q = 10_000_000usize;
        let mut scores = Vec::new();
        let mut prev = 0usize;
        for l in 1..=10 {
            let level = l as f64 * g / 10.0;
            let want = (q as f64 * level).round() as usize;
            let cut = normal_upper_quantile(level);
            scores.extend(std::iter::repeat_n(cut + 1e-9, want - prev));
            prev = want;
        }
        scores.resize(q, -5.0);
        // only the rounding of Q * level to whole counts is left
        assert!(tau_criterion(&scores, p) < 1e-8);
    }

    #[test]
    fn tau_grid_shape() {
        let ctx = small_context(8);
        let grid = tau_grid(&ctx.design, 20, 100.0);
        assert_eq!(grid.len(), 20);
        assert_abs_diff_eq!(grid[0], ctx.design.tau_max(), epsilon = 1e-12);
        assert_abs_diff_eq!(grid[19], ctx.design.tau_max() / 100.0, epsilon = 1e-9);
        for w in grid.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn two_variables_have_nothing_to_regress_on() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(11);
        let panel = CurvePanel::from_fn(g, 30, 2, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let ctx = FgmContext::new(&panel, 0.95).unwrap();
        assert_eq!(tau_grid(&ctx.design, 20, 100.0), vec![0.0]);
        let direct = crate::covtest::all_pair_records(&panel).unwrap();
        let rec = fgm_battery(&ctx, 0.0).unwrap();
        assert!((rec[0].statistic - direct[0].statistic).abs() < 1e-9 * direct[0].statistic);
    }
}
