//! Seeded generators for the simulated covariance and graphical designs.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::covtest::{CurvePanel, Pair};
use crate::error::{Error, Result};
use crate::presmooth::DiscretePanel;
use crate::quadrature::FunctionGrid;

/// Number of basis functions in every generator.
pub const BASIS_DIM: usize = 10;

/// Simulation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Model {
    /// Banded `Π_jk = (1 - |j-k|/3)₊`.
    Cov1,
    /// Sparse random `Π = B + c'' I`.
    Cov2,
    /// `Π = A ∘ B + c' I` with `s_a` off-diagonal nonzeros in `A`.
    Figure1 { s_a: usize },
    /// Chain DAG, parents `j-1` and `j-2`.
    Dag3,
    /// Random DAG over `p/3` roots.
    Dag4,
}

impl Model {
    pub fn is_dag(&self) -> bool {
        matches!(self, Model::Dag3 | Model::Dag4)
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Cov1 => write!(f, "cov1"),
            Model::Cov2 => write!(f, "cov2"),
            Model::Figure1 { s_a } => write!(f, "figure1:{s_a}"),
            Model::Dag3 => write!(f, "dag3"),
            Model::Dag4 => write!(f, "dag4"),
        }
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "cov1" | "model1" => Ok(Model::Cov1),
            "cov2" | "model2" => Ok(Model::Cov2),
            "dag3" | "model3" => Ok(Model::Dag3),
            "dag4" | "model4" => Ok(Model::Dag4),
            _ => match s.strip_prefix("figure1") {
                Some(rest) => {
                    let rest = rest.trim_start_matches([':', '(', '=']).trim_end_matches(')');
                    let s_a = rest
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad figure1 sparsity in {s:?}")))?;
                    Ok(Model::Figure1 { s_a })
                }
                None => Err(Error::invalid(format!("unknown model {s:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    Full,
    Discrete { t: usize, noise_sd: f64 },
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observation::Full => write!(f, "full"),
            Observation::Discrete { t, noise_sd } => write!(f, "discrete:T={t}:sd={noise_sd}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub model: Model,
    pub n: usize,
    pub p: usize,
    pub observation: Observation,
    pub grid_len: usize,
    pub seed: u64,
    /// Evaluate the basis at observation times instead of interpolating.
    pub exact_basis: bool,
}

impl SimSpec {
    pub fn new(model: Model, n: usize, p: usize) -> Self {
        Self { model, n, p, observation: Observation::Full, grid_len: 51, seed: 0, exact_basis: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::TooFewSubjects { required: 2, got: self.n });
        }
        if self.p < 2 {
            return Err(Error::invalid(format!("p must be at least 2, got {}", self.p)));
        }
        if self.grid_len < 2 {
            return Err(Error::InvalidGrid(format!("grid length {} < 2", self.grid_len)));
        }
        match self.model {
            Model::Dag3 | Model::Dag4 if self.p < 3 => {
                return Err(Error::invalid(format!("DAG models need p >= 3, got {}", self.p)))
            }
            Model::Dag4 if self.p % 3 != 0 => {
                return Err(Error::invalid(format!("dag4 needs p divisible by 3, got {}", self.p)))
            }
            Model::Figure1 { s_a } if s_a == 0 || s_a > self.p * (self.p - 1) / 2 => {
                return Err(Error::invalid(format!("s_A = {s_a} out of range for p = {}", self.p)))
            }
            _ => {}
        }
        if let Observation::Discrete { t, noise_sd } = self.observation {
            if t == 0 {
                return Err(Error::invalid("discrete arm needs T >= 1"));
            }
            if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
                return Err(Error::invalid(format!("noise sd must be >= 0, got {noise_sd}")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<FunctionGrid<f64>> {
        FunctionGrid::uniform(self.grid_len)
    }
}

/// True alternatives, plus the directed edges for DAG models.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub h1: Vec<Pair>,
    pub directed: Option<Vec<(usize, usize)>>,
}

impl GroundTruth {
    pub fn contains(&self, pair: Pair) -> bool {
        let key = if pair.0 < pair.1 { pair } else { (pair.1, pair.0) };
        self.h1.binary_search(&key).is_ok()
    }
}

fn fourier_row(m: usize, u: f64) -> f64 {
    use std::f64::consts::{SQRT_2, TAU};
    match m {
        0 => 1.0,
        9 => SQRT_2 * (5.0 * TAU * u).sin(),
        _ => {
            let freq = ((m + 1) / 2) as f64;
            if m % 2 == 1 {
                SQRT_2 * (freq * TAU * u).sin()
            } else {
                SQRT_2 * (freq * TAU * u).cos()
            }
        }
    }
}

/// The ten basis functions at a single point.
pub fn fourier_at(u: f64) -> [f64; BASIS_DIM] {
    std::array::from_fn(|m| fourier_row(m, u))
}

/// `10 × L` matrix of basis values: constant, then sin/cos pairs of
/// frequencies 1 to 4, then `sin(10πu)`.
pub fn fourier_basis(grid: &FunctionGrid<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(BASIS_DIM, grid.len(), |m, t| fourier_row(m, grid.points()[t]))
}

/// Standard deviations of the basis scores, `Δ^{1/2} = diag(1, 1/2, ..., 1/10)`.
fn score_sd(m: usize) -> f64 {
    1.0 / (m + 1) as f64
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn support_pairs(pi: &DMatrix<f64>) -> Vec<Pair> {
    let p = pi.nrows();
    (0..p)
        .flat_map(|j| (j + 1..p).map(move |k| (j, k)))
        .filter(|&(j, k)| pi[(j, k)] != 0.0)
        .collect()
}

/// Draws `Π` and its support for a covariance model.
pub fn gen_cov_design<R: Rng + ?Sized>(
    model: Model,
    p: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, GroundTruth)> {
    let pi = match model {
        Model::Cov1 => {
            let pi = DMatrix::from_fn(p, p, |j, k| (1.0 - j.abs_diff(k) as f64 / 3.0).max(0.0));
            let lmin = min_eigenvalue(&pi);
            if lmin < -1e-8 {
                return Err(Error::NotPSD(lmin));
            }
            pi
        }
        Model::Cov2 => {
            let prob = (3.0 / p as f64).min(1.0);
            let value = Uniform::new_inclusive(0.3, 0.8).expect("valid range");
            let mut b = DMatrix::zeros(p, p);
            for j in 0..p {
                for k in j + 1..p {
                    if rng.random_bool(prob) {
                        let v = value.sample(rng);
                        b[(j, k)] = v;
                        b[(k, j)] = v;
                    }
                }
            }
            let shift = (-min_eigenvalue(&b)).max(0.0) + 0.01;
            b + DMatrix::identity(p, p) * shift
        }
        Model::Figure1 { s_a } => {
            let q = p * (p - 1) / 2;
            if s_a == 0 || s_a > q {
                return Err(Error::invalid(format!("s_A = {s_a} out of range for p = {p}")));
            }
            let pairs: Vec<Pair> = (0..p).flat_map(|j| (j + 1..p).map(move |k| (j, k))).collect();
            let mut a = DMatrix::<f64>::identity(p, p);
            for idx in index::sample(rng, q, s_a) {
                let (j, k) = pairs[idx];
                a[(j, k)] = 1.0;
                a[(k, j)] = 1.0;
            }
            let value = Uniform::new_inclusive(0.2, 0.3).expect("valid range");
            let mut b = DMatrix::zeros(p, p);
            for j in 0..p {
                for k in j..p {
                    let v = value.sample(rng);
                    b[(j, k)] = v;
                    b[(k, j)] = v;
                }
            }
            let ab = a.component_mul(&b);
            let shift = (-min_eigenvalue(&ab)).max(0.0) + 0.01;
            ab + DMatrix::identity(p, p) * shift
        }
        Model::Dag3 | Model::Dag4 => {
            return Err(Error::invalid(format!("{model} is not a covariance model")))
        }
    };
    let truth = GroundTruth { h1: support_pairs(&pi), directed: None };
    Ok((pi, truth))
}

/// Basis scores `θ_ij` for every subject and variable, subject-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePanel {
    pub n: usize,
    pub p: usize,
    pub scores: Vec<[f64; BASIS_DIM]>,
}

impl ScorePanel {
    pub fn score(&self, i: usize, j: usize) -> &[f64; BASIS_DIM] {
        &self.scores[i * self.p + j]
    }

    /// Exact curve value at `u`.
    pub fn evaluate(&self, i: usize, j: usize, u: f64) -> f64 {
        self.score(i, j).iter().zip(fourier_at(u)).map(|(a, b)| a * b).sum()
    }

    pub fn to_panel(&self, grid: &FunctionGrid<f64>) -> Result<CurvePanel<f64>> {
        let basis = fourier_basis(grid);
        let l = grid.len();
        let mut values = Vec::with_capacity(self.n * self.p * l);
        for theta in &self.scores {
            values.extend((0..l).map(|t| (0..BASIS_DIM).map(|m| theta[m] * basis[(m, t)]).sum::<f64>()));
        }
        CurvePanel::new(grid.clone(), self.n, self.p, values)
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Lower factor `F` with `F Fᵀ = Π`: Cholesky, or an eigen square root with
/// a `1e-12` eigenvalue floor when `Π` is only semidefinite.
pub fn psd_factor(pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = pi.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(pi.clone());
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin < -1e-8 {
        return Err(Error::NotPSD(lmin));
    }
    let root = eig.eigenvalues.map(|v| v.max(1e-12).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Draws scores `θ_i ~ N(0, Π ⊗ Δ)`.
pub fn sample_cov_scores<R: Rng + ?Sized>(pi: &DMatrix<f64>, n: usize, rng: &mut R) -> Result<ScorePanel> {
    let p = pi.nrows();
    if pi.ncols() != p {
        return Err(Error::DimensionMismatch { expected: p, got: pi.ncols() });
    }
    let factor = psd_factor(pi)?;
    let mut scores = Vec::with_capacity(n * p);
    let mut z = DMatrix::<f64>::zeros(p, BASIS_DIM);
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = standard_normal(rng);
        }
        let mixed = &factor * &z;
        for j in 0..p {
            scores.push(std::array::from_fn(|m| mixed[(j, m)] * score_sd(m)));
        }
    }
    Ok(ScorePanel { n, p, scores })
}

/// Curves `X_ij = θ_ijᵀ s` on the grid, with `θ_i ~ N(0, Π ⊗ Δ)`.
pub fn sample_cov_panel<R: Rng + ?Sized>(
    pi: &DMatrix<f64>,
    n: usize,
    grid: &FunctionGrid<f64>,
    rng: &mut R,
) -> Result<CurvePanel<f64>> {
    sample_cov_scores(pi, n, rng)?.to_panel(grid)
}

/// Directed structural model with coefficient matrices per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct DagDesign {
    pub p: usize,
    /// `(parent, child)` edges.
    pub edges: Vec<(usize, usize)>,
    /// `coefs[e]` is the `10 × 10` matrix of `β` for `edges[e]`.
    pub coefs: Vec<DMatrix<f64>>,
    pub truth: GroundTruth,
}

fn edge_coefficients<R: Rng + ?Sized>(in_degree: usize, rng: &mut R) -> DMatrix<f64> {
    let c_b = Uniform::new_inclusive(4.0, 6.0).expect("valid range").sample(rng);
    let s = in_degree as f64;
    DMatrix::from_fn(BASIS_DIM, BASIS_DIM, |l, m| {
        // 1-based l + m
        let lm = (l + m + 2) as f64;
        let sign = if (l + m) % 2 == 0 { 1.0 } else { -1.0 };
        sign * c_b / (s * lm * lm)
    })
}

pub fn gen_dag_design<R: Rng + ?Sized>(model: Model, p: usize, rng: &mut R) -> Result<DagDesign> {
    if p < 3 {
        return Err(Error::invalid(format!("DAG models need p >= 3, got {p}")));
    }
    let parents: Vec<Vec<usize>> = match model {
        Model::Dag3 => (0..p).map(|j| if j < 2 { vec![] } else { vec![j - 2, j - 1] }).collect(),
        Model::Dag4 => {
            if p % 3 != 0 {
                return Err(Error::invalid(format!("dag4 needs p divisible by 3, got {p}")));
            }
            (0..p)
                .map(|j| {
                    if j < p / 3 {
                        return vec![];
                    }
                    let count = if rng.random_bool(0.5) { 1 } else { 2 };
                    let mut picked = index::sample(rng, j, count.min(j)).into_vec();
                    picked.sort_unstable();
                    picked
                })
                .collect()
        }
        _ => return Err(Error::invalid(format!("{model} is not a DAG model"))),
    };
    let mut edges = Vec::new();
    let mut coefs = Vec::new();
    for (child, pa) in parents.iter().enumerate() {
        for &parent in pa {
            edges.push((parent, child));
            coefs.push(edge_coefficients(pa.len(), rng));
        }
    }
    let h1 = moralize(p, &edges)?;
    Ok(DagDesign { p, truth: GroundTruth { h1, directed: Some(edges.clone()) }, edges, coefs })
}

/// Scores generated along the DAG: `θ_j = Σ_{k→j} B_jk θ_k + θ̃_j`,
/// `θ̃ ~ N(0, Δ)`.
pub fn sample_dag_scores<R: Rng + ?Sized>(design: &DagDesign, n: usize, rng: &mut R) -> Result<ScorePanel> {
    let p = design.p;
    let order = topological_order(p, &design.edges)?;
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); p];
    for (e, &(_, child)) in design.edges.iter().enumerate() {
        incoming[child].push(e);
    }
    let mut scores = vec![[0.0; BASIS_DIM]; n * p];
    for i in 0..n {
        let innovations: Vec<[f64; BASIS_DIM]> = (0..p)
            .map(|_| std::array::from_fn(|m| standard_normal(rng) * score_sd(m)))
            .collect();
        for &j in &order {
            let mut theta = innovations[j];
            for &e in &incoming[j] {
                let parent = scores[i * p + design.edges[e].0];
                let b = &design.coefs[e];
                for (l, th) in theta.iter_mut().enumerate() {
                    *th += (0..BASIS_DIM).map(|m| b[(l, m)] * parent[m]).sum::<f64>();
                }
            }
            scores[i * p + j] = theta;
        }
    }
    Ok(ScorePanel { n, p, scores })
}

pub fn sample_dag_panel<R: Rng + ?Sized>(
    design: &DagDesign,
    n: usize,
    grid: &FunctionGrid<f64>,
    rng: &mut R,
) -> Result<CurvePanel<f64>> {
    sample_dag_scores(design, n, rng)?.to_panel(grid)
}

/// Linear interpolation of grid values, extended linearly past the end points.
pub fn interpolate(points: &[f64], values: &[f64], u: f64) -> f64 {
    let l = points.len();
    if l == 1 {
        return values[0];
    }
    let hi = points.partition_point(|&x| x < u).clamp(1, l - 1);
    let lo = hi - 1;
    let frac = (u - points[lo]) / (points[hi] - points[lo]);
    values[lo] + frac * (values[hi] - values[lo])
}

/// `T` uniform times per curve with `N(0, noise_sd²)` noise on the
/// interpolated curve value. Times are returned sorted.
pub fn discretize<R: Rng + ?Sized>(
    panel: &CurvePanel<f64>,
    t: usize,
    noise_sd: f64,
    rng: &mut R,
) -> Result<DiscretePanel> {
    let points = panel.grid().points().to_vec();
    discretize_with(panel.n(), panel.p(), t, noise_sd, rng, |i, j, u| {
        interpolate(&points, panel.curve(i, j), u)
    })
}

/// As [`discretize`], evaluating the basis expansion exactly.
pub fn discretize_exact<R: Rng + ?Sized>(
    scores: &ScorePanel,
    t: usize,
    noise_sd: f64,
    rng: &mut R,
) -> Result<DiscretePanel> {
    discretize_with(scores.n, scores.p, t, noise_sd, rng, |i, j, u| scores.evaluate(i, j, u))
}

fn discretize_with<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    t: usize,
    noise_sd: f64,
    rng: &mut R,
    eval: impl Fn(usize, usize, f64) -> f64,
) -> Result<DiscretePanel> {
    if t == 0 {
        return Err(Error::invalid("discretization needs T >= 1"));
    }
    let mut observations = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            let mut obs: Vec<(f64, f64)> = (0..t)
                .map(|_| {
                    let u: f64 = rng.random();
                    let e = standard_normal(rng);
                    (u, eval(i, j, u) + noise_sd * e)
                })
                .collect();
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            observations.push(obs);
        }
    }
    DiscretePanel::new(n, p, observations)
}

fn topological_order(p: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut indeg = vec![0usize; p];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); p];
    for &(a, b) in edges {
        if a >= p || b >= p {
            return Err(Error::IndexError { index: a.max(b), len: p });
        }
        if a == b {
            return Err(Error::NotADAG);
        }
        indeg[b] += 1;
        children[a].push(b);
    }
    let mut queue: VecDeque<usize> = (0..p).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(p);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &c in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() != p {
        return Err(Error::NotADAG);
    }
    Ok(order)
}

/// Undirected moral graph of a DAG on `p` nodes as sorted `(j, k)`, `j < k`.
pub fn moralize(p: usize, edges: &[(usize, usize)]) -> Result<Vec<Pair>> {
    topological_order(p, edges)?;
    let canon = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
    let mut out: BTreeSet<Pair> = edges.iter().map(|&(a, b)| canon(a, b)).collect();
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); p];
    for &(a, b) in edges {
        parents[b].push(a);
    }
    for pa in &parents {
        for (x, &a) in pa.iter().enumerate() {
            for &b in &pa[x + 1..] {
                if a != b {
                    out.insert(canon(a, b));
                }
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Design drawn once per experiment.
#[derive(Debug, Clone)]
pub enum Design {
    Cov { pi: DMatrix<f64>, truth: GroundTruth },
    Dag(DagDesign),
}

impl Design {
    pub fn truth(&self) -> &GroundTruth {
        match self {
            Design::Cov { truth, .. } => truth,
            Design::Dag(d) => &d.truth,
        }
    }
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct Replication {
    /// Curves on the grid, before any noise.
    pub panel: CurvePanel<f64>,
    /// Noisy discrete observations, for the discrete arm.
    pub discrete: Option<DiscretePanel>,
}

/// Generator for the design, seeded from the base seed on its own stream so
/// it never overlaps replication streams.
pub fn design_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Generator for replication `r`, seeded with `seed + r`.
pub fn replication_rng(seed: u64, r: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(r))
}

pub fn draw_design(spec: &SimSpec) -> Result<Design> {
    spec.validate()?;
    let mut rng = design_rng(spec.seed);
    if spec.model.is_dag() {
        Ok(Design::Dag(gen_dag_design(spec.model, spec.p, &mut rng)?))
    } else {
        let (pi, truth) = gen_cov_design(spec.model, spec.p, &mut rng)?;
        Ok(Design::Cov { pi, truth })
    }
}

pub fn draw_replication(spec: &SimSpec, design: &Design, r: u64) -> Result<Replication> {
    let grid = spec.grid()?;
    let mut rng = replication_rng(spec.seed, r);
    let scores = match design {
        Design::Cov { pi, .. } => sample_cov_scores(pi, spec.n, &mut rng)?,
        Design::Dag(d) => sample_dag_scores(d, spec.n, &mut rng)?,
    };
    let panel = scores.to_panel(&grid)?;
    let discrete = match spec.observation {
        Observation::Full => None,
        Observation::Discrete { t, noise_sd } => Some(if spec.exact_basis {
            discretize_exact(&scores, t, noise_sd, &mut rng)?
        } else {
            discretize(&panel, t, noise_sd, &mut rng)?
        }),
    };
    Ok(Replication { panel, discrete })
}
