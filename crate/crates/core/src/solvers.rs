//! Sliced Picard solvers for nonlinear forward equations and BSDEs on trees.
//!
//! Forward equation, per edge v → c:
//!   X(c) = X(v) + ΔJ(c) + f(v, X)·Δ⟨N₁,N₂⟩(v) + g(v, X)·ΔM(c)
//! BSDE, per internal node v:
//!   Y(v) = E[Y(c) + J(c) | v] − J(v) + f(v, Y(v))·Δ⟨N₁,N₂⟩(v) + g(v, Y(v), Z(v))·Δ⟨M⟩(v)
//! with Z(v) = E[(Y + J)(c) ΔM(c) | v] / E[ΔM² | v] and M^⊥ the remainder.
//!
//! Time is cut into ε-slices (greedy, pathwise); each slice is a contraction
//! for the Picard map when the budget ρ < 1. Forward slices are solved first
//! to last, backward slices last to first.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bmo::{bmo_norm, certify, check_p, greedy_slices, min_feasible_eps, norm_rp, slice_part, SliceCertificate};
use crate::corpus::{random_martingale, random_tree, rng, Generator};
use crate::error::{Error, Result};
use crate::tree::{stochastic_integral, step_covariation, ProcessKind, TreeFiltration, TreeMartingale, TreeProcess, DEGENERATE_VARIANCE};

pub type Vector = DVector<f64>;

/// Lipschitz coefficient families. Per-node parameters are read at the node
/// where the step starts.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Zero,
    /// c(v)·x
    Linear(Vec<f64>),
    /// C(v)·x
    Matrix(Vec<DMatrix<f64>>),
    /// c(v)·sin(x) componentwise
    Sine(Vec<f64>),
    /// c(v)·x*(v)·(1,…,1), x* the running max of |x| along the path
    RunningMax(Vec<f64>),
}

impl Coefficient {
    pub fn eval(&self, v: usize, x: &Vector, xstar: f64) -> Vector {
        match self {
            Coefficient::Zero => Vector::zeros(x.len()),
            Coefficient::Linear(c) => x * c[v],
            Coefficient::Matrix(c) => &c[v] * x,
            Coefficient::Sine(c) => x.map(|t| c[v] * t.sin()),
            Coefficient::RunningMax(c) => Vector::from_element(x.len(), c[v] * xstar),
        }
    }

    /// Lipschitz envelope at v with respect to the running max of |x₁ − x₂|.
    pub fn envelope(&self, v: usize, dim: usize) -> f64 {
        match self {
            Coefficient::Zero => 0.0,
            Coefficient::Linear(c) | Coefficient::Sine(c) => c[v].abs(),
            Coefficient::Matrix(c) => c[v].clone().svd(false, false).singular_values.max(),
            Coefficient::RunningMax(c) => c[v].abs() * (dim as f64).sqrt(),
        }
    }

    pub fn envelope_process(&self, tree: &TreeFiltration, dim: usize) -> TreeProcess<f64> {
        TreeProcess::from_fn(tree, ProcessKind::Predictable, |v| self.envelope(v, dim))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coefficient::Zero => true,
            Coefficient::Linear(c) | Coefficient::Sine(c) | Coefficient::RunningMax(c) => c.iter().all(|&x| x == 0.0),
            Coefficient::Matrix(c) => c.iter().all(|m| m.iter().all(|&x| x == 0.0)),
        }
    }

    pub fn kind(&self) -> CoefficientKind {
        match self {
            Coefficient::Zero => CoefficientKind::Zero,
            Coefficient::Linear(_) => CoefficientKind::Linear,
            Coefficient::Matrix(_) => CoefficientKind::Matrix,
            Coefficient::Sine(_) => CoefficientKind::Sine,
            Coefficient::RunningMax(_) => CoefficientKind::RunningMax,
        }
    }

    /// Largest observed |f(v,x₁) − f(v,x₂)| / (envelope·(x₁−x₂)*) over random pairs of processes.
    pub fn audit_envelope(&self, tree: &TreeFiltration, dim: usize, trials: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let x1: Vec<Vector> = (0..tree.n_nodes()).map(|_| Vector::from_fn(dim, |_, _| r.gen_range(-3.0..3.0))).collect();
            let x2: Vec<Vector> = (0..tree.n_nodes()).map(|_| Vector::from_fn(dim, |_, _| r.gen_range(-3.0..3.0))).collect();
            let s1 = running_max_norm(tree, &x1);
            let s2 = running_max_norm(tree, &x2);
            let d: Vec<Vector> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
            let sd = running_max_norm(tree, &d);
            for v in tree.internal_nodes() {
                let lhs = (self.eval(v, &x1[v], s1[v]) - self.eval(v, &x2[v], s2[v])).norm();
                let rhs = self.envelope(v, dim) * sd[v];
                if lhs > 0.0 {
                    worst = worst.max(lhs / rhs);
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientKind {
    Zero,
    Linear,
    Matrix,
    Sine,
    RunningMax,
}

/// A named coefficient family with per-node parameters drawn uniformly from [−scale, scale].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecipe {
    pub kind: CoefficientKind,
    #[serde(default)]
    pub scale: f64,
}

impl CoefficientRecipe {
    pub const ZERO: CoefficientRecipe = CoefficientRecipe { kind: CoefficientKind::Zero, scale: 0.0 };

    pub fn new(kind: CoefficientKind, scale: f64) -> Self {
        CoefficientRecipe { kind, scale }
    }

    pub fn build(&self, tree: &TreeFiltration, dim: usize, r: &mut impl Rng) -> Coefficient {
        let n = tree.n_nodes();
        let s = self.scale;
        let draw = |r: &mut dyn rand::RngCore| if s > 0.0 { r.gen_range(-s..=s) } else { 0.0 };
        match self.kind {
            CoefficientKind::Zero => Coefficient::Zero,
            CoefficientKind::Linear => Coefficient::Linear((0..n).map(|_| draw(r)).collect()),
            CoefficientKind::Sine => Coefficient::Sine((0..n).map(|_| draw(r)).collect()),
            CoefficientKind::RunningMax => Coefficient::RunningMax((0..n).map(|_| draw(r)).collect()),
            CoefficientKind::Matrix => {
                let k = (dim as f64).sqrt();
                Coefficient::Matrix((0..n).map(|_| DMatrix::from_fn(dim, dim, |_, _| draw(r) / k)).collect())
            }
        }
    }
}

fn running_max_norm(tree: &TreeFiltration, x: &[Vector]) -> Vec<f64> {
    let mut out = vec![0.0; tree.n_nodes()];
    out[0] = x[0].norm();
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            out[c] = out[v].max(x[c].norm());
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SeSpec {
    pub dim: usize,
    pub p: f64,
    pub forcing: Vec<Vector>,
    pub f: Coefficient,
    pub g: Coefficient,
    pub n1: TreeMartingale<f64>,
    pub n2: TreeMartingale<f64>,
    pub m: TreeMartingale<f64>,
}

#[derive(Debug, Clone)]
pub struct BsdeSpec {
    pub dim: usize,
    pub p: f64,
    /// ξ per leaf, in leaf order.
    pub terminal: Vec<Vector>,
    pub forcing: Vec<Vector>,
    pub f: Coefficient,
    /// g(v, y, z) = gy(v, y) + gz(v, z)
    pub gy: Coefficient,
    pub gz: Coefficient,
    pub n1: TreeMartingale<f64>,
    pub n2: TreeMartingale<f64>,
    pub m: TreeMartingale<f64>,
}

fn check_vectors(tree: &TreeFiltration, v: &[Vector], len: usize, dim: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Dimension { expected: len, got: v.len() });
    }
    if let Some(x) = v.iter().find(|x| x.len() != dim) {
        return Err(Error::Dimension { expected: dim, got: x.len() });
    }
    let _ = tree;
    Ok(())
}

impl SeSpec {
    pub fn validate(&self, tree: &TreeFiltration) -> Result<()> {
        check_p(self.p)?;
        if self.p.is_infinite() {
            return Err(Error::InvalidExponent(self.p));
        }
        check_vectors(tree, &self.forcing, tree.n_nodes(), self.dim)
    }
}

impl BsdeSpec {
    pub fn validate(&self, tree: &TreeFiltration) -> Result<()> {
        check_p(self.p)?;
        if self.p.is_infinite() {
            return Err(Error::InvalidExponent(self.p));
        }
        check_vectors(tree, &self.forcing, tree.n_nodes(), self.dim)?;
        check_vectors(tree, &self.terminal, tree.n_leaves(), self.dim)
    }

    /// The BMO-variant restriction: f = 0, J = 0, g independent of y.
    pub fn is_bmo_form(&self) -> bool {
        self.f.is_zero() && self.gy.is_zero() && self.forcing.iter().all(|x| x.iter().all(|&t| t == 0.0))
    }
}

/// Recipe for a random spec on a seeded random tree; the JSON form used by spec files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecRecipe {
    pub depth: usize,
    pub branching: usize,
    #[serde(default = "default_generator")]
    pub generator: Generator,
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub dim: usize,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default = "one_f")]
    pub forcing_scale: f64,
    #[serde(default = "one_f")]
    pub terminal_scale: f64,
    /// Scale of the driver martingales N₁, N₂ relative to M.
    #[serde(default = "one_f")]
    pub driver_scale: f64,
    #[serde(default = "zero_recipe")]
    pub f: CoefficientRecipe,
    #[serde(default = "zero_recipe")]
    pub g: CoefficientRecipe,
    #[serde(default = "zero_recipe")]
    pub gy: CoefficientRecipe,
    #[serde(default = "zero_recipe")]
    pub gz: CoefficientRecipe,
}

fn default_generator() -> Generator {
    Generator::Uniform
}
fn one_usize() -> usize {
    1
}
fn two() -> f64 {
    2.0
}
fn one_f() -> f64 {
    1.0
}
fn zero_recipe() -> CoefficientRecipe {
    CoefficientRecipe::ZERO
}

impl SpecRecipe {
    pub fn new(depth: usize, branching: usize, seed: u64) -> Self {
        SpecRecipe {
            depth,
            branching,
            generator: Generator::Uniform,
            seed,
            dim: 1,
            p: 2.0,
            forcing_scale: 1.0,
            terminal_scale: 1.0,
            driver_scale: 1.0,
            f: CoefficientRecipe::ZERO,
            g: CoefficientRecipe::ZERO,
            gy: CoefficientRecipe::ZERO,
            gz: CoefficientRecipe::ZERO,
        }
    }

    fn base(&self) -> Result<(TreeFiltration, TreeMartingale<f64>, rand_chacha::ChaCha8Rng)> {
        if self.dim == 0 {
            return Err(Error::Config("dimension must be ≥ 1".into()));
        }
        let (tree, m) = random_tree(self.seed, self.depth, self.branching, self.generator)?;
        Ok((tree, m, rng(self.seed ^ 0x0DD_BA11)))
    }

    fn drivers(&self, tree: &TreeFiltration, r: &mut rand_chacha::ChaCha8Rng) -> (TreeMartingale<f64>, TreeMartingale<f64>) {
        let n1 = random_martingale(tree, r).scale(tree, self.driver_scale);
        let n2 = random_martingale(tree, r).scale(tree, self.driver_scale);
        (n1, n2)
    }

    fn vectors(&self, count: usize, scale: f64, r: &mut impl Rng) -> Vec<Vector> {
        (0..count).map(|_| Vector::from_fn(self.dim, |_, _| scale * r.gen_range(-1.0..1.0))).collect()
    }

    pub fn build_se(&self) -> Result<(TreeFiltration, SeSpec)> {
        let (tree, m, mut r) = self.base()?;
        let (n1, n2) = self.drivers(&tree, &mut r);
        let forcing = self.vectors(tree.n_nodes(), self.forcing_scale, &mut r);
        let f = self.f.build(&tree, self.dim, &mut r);
        let g = self.g.build(&tree, self.dim, &mut r);
        let spec = SeSpec { dim: self.dim, p: self.p, forcing, f, g, n1, n2, m };
        spec.validate(&tree)?;
        Ok((tree, spec))
    }

    pub fn build_bsde(&self) -> Result<(TreeFiltration, BsdeSpec)> {
        let (tree, m, mut r) = self.base()?;
        let (n1, n2) = self.drivers(&tree, &mut r);
        let terminal = self.vectors(tree.n_leaves(), self.terminal_scale, &mut r);
        let forcing = self.vectors(tree.n_nodes(), self.forcing_scale, &mut r);
        let f = self.f.build(&tree, self.dim, &mut r);
        let gy = self.gy.build(&tree, self.dim, &mut r);
        let gz = self.gz.build(&tree, self.dim, &mut r);
        let spec = BsdeSpec { dim: self.dim, p: self.p, terminal, forcing, f, gy, gz, n1, n2, m };
        spec.validate(&tree)?;
        Ok((tree, spec))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetKind {
    Se,
    Bsde,
    BsdeBmo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionBudget {
    pub kind: BudgetKind,
    pub p: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub cp: f64,
    /// q(1 + C_p) + C_p (BSDE only).
    pub cbar_p: Option<f64>,
    /// ‖α∘N₁‖_BMO
    pub alpha_bmo: f64,
    pub rho: f64,
    pub feasible: bool,
}

/// ρ₁ = 2pε₁‖α∘N₁‖_BMO + √2·ε₂·C_p
pub fn rho_se(p: f64, eps1: f64, eps2: f64, cp: f64, alpha_bmo: f64) -> f64 {
    2.0 * p * eps1 * alpha_bmo + SQRT_2 * eps2 * cp
}

/// ρ₂ = C̄_p·max{√2pε₃, 2p‖α∘N₁‖_BMO ε₁ + 2pε₂²}
pub fn rho_bsde(p: f64, eps1: f64, eps2: f64, eps3: f64, cp: f64, alpha_bmo: f64) -> (f64, f64) {
    let q = p / (p - 1.0);
    let cbar = q * (1.0 + cp) + cp;
    (cbar * (SQRT_2 * p * eps3).max(2.0 * p * alpha_bmo * eps1 + 2.0 * p * eps2 * eps2), cbar)
}

fn weighted_bmo(tree: &TreeFiltration, w: &TreeProcess<f64>, m: &TreeMartingale<f64>) -> Result<(TreeMartingale<f64>, f64)> {
    let wm = stochastic_integral(tree, w, m)?;
    let b = bmo_norm(tree, &wm).value;
    Ok((wm, b))
}

/// A slice level only counts when its term is present.
fn active_eps(c: &Coefficient, eps: f64) -> f64 {
    if c.is_zero() {
        0.0
    } else {
        eps
    }
}

/// Slice levels of absent terms are taken as 0.
pub fn budget_se(tree: &TreeFiltration, spec: &SeSpec, eps1: f64, eps2: f64, cp: f64) -> Result<ContractionBudget> {
    let (eps1, eps2) = (active_eps(&spec.f, eps1), active_eps(&spec.g, eps2));
    let (_, alpha_bmo) = weighted_bmo(tree, &spec.f.envelope_process(tree, spec.dim), &spec.n1)?;
    let rho = rho_se(spec.p, eps1, eps2, cp, alpha_bmo);
    Ok(ContractionBudget { kind: BudgetKind::Se, p: spec.p, eps1, eps2, eps3: 0.0, cp, cbar_p: None, alpha_bmo, rho, feasible: rho < 1.0 })
}

/// Slice levels of absent terms are taken as 0.
pub fn budget_bsde(tree: &TreeFiltration, spec: &BsdeSpec, eps1: f64, eps2: f64, eps3: f64, cp: f64) -> Result<ContractionBudget> {
    let (eps1, eps2, eps3) = (active_eps(&spec.f, eps1), active_eps(&spec.gy, eps2), active_eps(&spec.gz, eps3));
    if !(spec.p > 1.0) {
        return Err(Error::InvalidExponent(spec.p));
    }
    let (_, alpha_bmo) = weighted_bmo(tree, &spec.f.envelope_process(tree, spec.dim), &spec.n1)?;
    let (rho, cbar) = rho_bsde(spec.p, eps1, eps2, eps3, cp, alpha_bmo);
    Ok(ContractionBudget { kind: BudgetKind::Bsde, p: spec.p, eps1, eps2, eps3, cp, cbar_p: Some(cbar), alpha_bmo, rho, feasible: rho < 1.0 })
}

/// √2·ε for the BMO variant.
pub fn budget_bsde_bmo(eps: f64) -> ContractionBudget {
    let rho = SQRT_2 * eps;
    ContractionBudget { kind: BudgetKind::BsdeBmo, p: f64::INFINITY, eps1: 0.0, eps2: 0.0, eps3: eps, cp: 0.0, cbar_p: None, alpha_bmo: 0.0, rho, feasible: rho < 1.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialGuess {
    Zero,
    /// Carried boundary value plus the forcing increment (forward) or the forcing itself (backward).
    Forcing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub initial: InitialGuess,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-12, max_iter: 500, initial: InitialGuess::Forcing }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceLog {
    pub slice: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Distance between successive iterates, in the slice norm.
    pub distances: Vec<f64>,
    /// d_{m+1}/d_m while d_m is above the rounding floor.
    pub ratios: Vec<f64>,
    pub max_ratio: Option<f64>,
    /// Predicted contraction bound on this slice, where one is available.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub kind: BudgetKind,
    pub converged: bool,
    pub budget: ContractionBudget,
    pub slice_count: usize,
    pub slices: Vec<SliceLog>,
    pub max_ratio: Option<f64>,
    /// Largest defect of the defining recursion at the returned solution.
    pub residual: f64,
    /// Largest |E[ΔM·ΔM^⊥ | v]| and |⟨M, M^⊥⟩_T| (backward solvers).
    pub orthogonality: Option<f64>,
    /// Solution norm over data norm.
    pub apriori: f64,
    pub certificates: Vec<SliceCertificate>,
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct SeSolution {
    pub x: Vec<Vector>,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub y: Vec<Vector>,
    /// Predictable, per internal node (zero at leaves).
    pub z: Vec<Vector>,
    pub m_perp: Vec<Vector>,
}

#[derive(Debug, Clone)]
pub struct Outcome<T> {
    /// `None` when some slice failed to converge.
    pub solution: Option<T>,
    pub report: SolveReport,
}

/// Norm of a vector process as a real process.
fn norms(x: &[Vector]) -> Vec<f64> {
    x.iter().map(|v| v.norm()).collect()
}

fn rp_vec(tree: &TreeFiltration, x: &[Vector], p: f64) -> f64 {
    norm_rp(tree, &norms(x), p).map(|r| r.value).unwrap_or(f64::NAN)
}

/// ‖z∘M‖_{H^p} for a predictable vector integrand.
fn hp_integral(tree: &TreeFiltration, z: &[Vector], m: &TreeMartingale<f64>, p: f64) -> f64 {
    let mut b = vec![0.0; tree.n_nodes()];
    for v in tree.internal_nodes() {
        let s = z[v].norm_squared() * m.step_bracket(tree, v);
        for c in tree.children(v) {
            b[c] = b[v] + s;
        }
    }
    tree.expect_leaves(|l| b[l].powf(p / 2.0)).powf(1.0 / p)
}

/// ‖z∘M‖_BMO for a predictable vector integrand.
fn bmo_integral(tree: &TreeFiltration, z: &[Vector], m: &TreeMartingale<f64>) -> f64 {
    let mut g = vec![0.0; tree.n_nodes()];
    for v in tree.internal_nodes().rev() {
        g[v] = z[v].norm_squared() * m.step_bracket(tree, v) + tree.child_mean(v, |c| g[c]);
    }
    g.iter().copied().fold(0.0, f64::max).sqrt()
}

fn sup_diff(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Ratio floor: successive distances below this are rounding noise.
fn noise_floor(scale: f64) -> f64 {
    1e-11 * (1.0 + scale)
}

struct Slicing {
    slice_of: Vec<usize>,
    count: usize,
    certificates: Vec<SliceCertificate>,
}

/// Slices jointly; targets whose weight is identically zero are left out
/// (their term vanishes from the map), infinite ε means no constraint.
fn slicing(tree: &TreeFiltration, targets: Vec<(TreeMartingale<f64>, f64)>) -> Result<Slicing> {
    let active: Vec<(TreeMartingale<f64>, f64)> = targets.into_iter().filter(|(m, e)| e.is_finite() && bmo_norm(tree, m).value > 0.0).collect();
    for (_, e) in &active {
        if !(*e > 0.0) {
            return Err(Error::Config(format!("slice level must be positive, got {e}")));
        }
    }
    let refs: Vec<(&TreeMartingale<f64>, f64)> = active.iter().map(|(m, e)| (m, *e)).collect();
    let slice_of = if refs.is_empty() { vec![0; tree.n_nodes()] } else { greedy_slices(tree, &refs)? };
    let count = slice_of.iter().copied().max().unwrap_or(0) + 1;
    let certificates = active.iter().map(|(m, e)| certify(tree, m, *e, slice_of.clone())).collect();
    Ok(Slicing { slice_of, count, certificates })
}

fn summarize(kind: BudgetKind, budget: &ContractionBudget, slices: Vec<SliceLog>, sl: Slicing, residual: f64, orthogonality: Option<f64>, apriori: f64, tol: f64) -> SolveReport {
    let converged = slices.iter().all(|s| s.converged);
    let max_ratio = slices.iter().filter_map(|s| s.max_ratio).reduce(f64::max);
    SolveReport {
        kind,
        converged,
        budget: budget.clone(),
        slice_count: sl.count,
        slices,
        max_ratio,
        residual,
        orthogonality,
        apriori,
        certificates: sl.certificates,
        tol,
    }
}

fn push_distance(log: &mut SliceLog, d: f64, scale: f64) {
    if let Some(&prev) = log.distances.last() {
        if prev > noise_floor(scale) && d > 0.0 {
            log.ratios.push(d / prev);
        }
    }
    log.distances.push(d);
    log.max_ratio = log.ratios.iter().copied().reduce(f64::max);
}

/// Martingales the forward solver slices: N₂ (zero when f is absent) and β∘M.
fn se_targets(tree: &TreeFiltration, spec: &SeSpec) -> Result<[TreeMartingale<f64>; 2]> {
    let n2 = if spec.f.is_zero() { TreeMartingale::zero(tree) } else { spec.n2.clone() };
    let (beta_m, _) = weighted_bmo(tree, &spec.g.envelope_process(tree, spec.dim), &spec.m)?;
    Ok([n2, beta_m])
}

/// N₂ (zero when f is absent), √β∘M and γ∘M.
fn bsde_targets(tree: &TreeFiltration, spec: &BsdeSpec) -> Result<[TreeMartingale<f64>; 3]> {
    let dim = spec.dim;
    let n2 = if spec.f.is_zero() { TreeMartingale::zero(tree) } else { spec.n2.clone() };
    let sqrt_beta = TreeProcess::from_fn(tree, ProcessKind::Predictable, |v| spec.gy.envelope(v, dim).sqrt());
    let (sb, _) = weighted_bmo(tree, &sqrt_beta, &spec.m)?;
    let (gm, _) = weighted_bmo(tree, &spec.gz.envelope_process(tree, dim), &spec.m)?;
    Ok([n2, sb, gm])
}

/// Smallest slice levels (ε₁, ε₂) the forward solver can be sliced at.
pub fn min_slice_levels_se(tree: &TreeFiltration, spec: &SeSpec) -> Result<[f64; 2]> {
    Ok(se_targets(tree, spec)?.map(|m| min_feasible_eps(tree, &m)))
}

/// Smallest slice levels (ε₁, ε₂, ε₃) for the backward solver; ε₃ alone applies to the BMO variant.
pub fn min_slice_levels_bsde(tree: &TreeFiltration, spec: &BsdeSpec) -> Result<[f64; 3]> {
    Ok(bsde_targets(tree, spec)?.map(|m| min_feasible_eps(tree, &m)))
}

/// Requested levels raised just above the feasibility floor where needed.
pub fn feasible_levels<const N: usize>(requested: [f64; N], floor: [f64; N]) -> [f64; N] {
    std::array::from_fn(|i| requested[i].max(1.001 * floor[i]))
}

pub fn solve_se(tree: &TreeFiltration, spec: &SeSpec, budget: &ContractionBudget, cfg: &SolverConfig) -> Result<Outcome<SeSolution>> {
    spec.validate(tree)?;
    let dim = spec.dim;
    let [n2, beta_m] = se_targets(tree, spec)?;
    let sl = slicing(tree, vec![(n2, budget.eps1), (beta_m, budget.eps2)])?;
    let cov12 = step_covariation(tree, &spec.n1, &spec.n2);
    let j = &spec.forcing;

    let mut x: Vec<Vector> = vec![Vector::zeros(dim); tree.n_nodes()];
    x[0] = j[0].clone();
    let mut anchor = vec![0usize; tree.n_nodes()];
    let mut logs = Vec::new();
    for i in 0..sl.count {
        let in_slice: Vec<usize> = tree.internal_nodes().filter(|&v| sl.slice_of[v] == i).collect();
        for &v in &in_slice {
            anchor[v] = match tree.parent(v) {
                Some(u) if sl.slice_of[u] == i => anchor[u],
                _ => v,
            };
        }
        for &v in &in_slice {
            for c in tree.children(v) {
                x[c] = match cfg.initial {
                    InitialGuess::Zero => Vector::zeros(dim),
                    InitialGuess::Forcing => &x[anchor[v]] + &j[c] - &j[anchor[v]],
                };
            }
        }
        let mut log = SliceLog { slice: i, iterations: 0, converged: in_slice.is_empty(), distances: vec![], ratios: vec![], max_ratio: None, bound: None };
        while !log.converged && log.iterations < cfg.max_iter {
            let star = running_max_norm(tree, &x);
            let mut next = x.clone();
            for &v in &in_slice {
                let fv = spec.f.eval(v, &x[v], star[v]) * cov12[v];
                let gv = spec.g.eval(v, &x[v], star[v]);
                for c in tree.children(v) {
                    let step = &j[c] - &j[v] + &fv + &gv * spec.m.increment(tree, c);
                    next[c] = &next[v] + step;
                }
            }
            let diff: Vec<Vector> = next.iter().zip(&x).map(|(a, b)| a - b).collect();
            let d = rp_vec(tree, &diff, spec.p);
            let ds = sup_diff(&next, &x);
            x = next;
            log.iterations += 1;
            push_distance(&mut log, d, rp_vec(tree, &x, spec.p));
            if d <= cfg.tol && ds <= cfg.tol {
                log.converged = true;
            }
        }
        let converged = log.converged;
        logs.push(log);
        if !converged {
            break;
        }
    }
    let residual = se_residual(tree, spec, &x);
    let jn = rp_vec(tree, j, spec.p);
    let apriori = if jn > 0.0 { rp_vec(tree, &x, spec.p) / jn } else { 0.0 };
    let report = summarize(BudgetKind::Se, budget, logs, sl, residual, None, apriori, cfg.tol);
    let solution = report.converged.then_some(SeSolution { x });
    Ok(Outcome { solution, report })
}

/// Largest per-edge defect of the forward recursion.
pub fn se_residual(tree: &TreeFiltration, spec: &SeSpec, x: &[Vector]) -> f64 {
    let cov12 = step_covariation(tree, &spec.n1, &spec.n2);
    let star = running_max_norm(tree, x);
    let mut worst = (&x[0] - &spec.forcing[0]).norm();
    for v in tree.internal_nodes() {
        let fv = spec.f.eval(v, &x[v], star[v]) * cov12[v];
        let gv = spec.g.eval(v, &x[v], star[v]);
        for c in tree.children(v) {
            let rhs = &x[v] + &spec.forcing[c] - &spec.forcing[v] + &fv + &gv * spec.m.increment(tree, c);
            worst = worst.max((&x[c] - rhs).norm());
        }
    }
    worst
}

#[derive(Clone, Copy, PartialEq)]
enum BackwardNorm {
    /// R^p of the y-difference plus H^p of the z-difference∘M
    RpHp,
    /// BMO of the z-difference∘M
    Bmo,
}

fn kw_step(tree: &TreeFiltration, m: &TreeMartingale<f64>, v: usize, yj: impl Fn(usize) -> Vector, dim: usize) -> (Vector, Vector) {
    let mean = tree.children(v).fold(Vector::zeros(dim), |acc, c| acc + yj(c) * tree.prob(c));
    let var = m.step_bracket(tree, v);
    let z = if var <= DEGENERATE_VARIANCE {
        Vector::zeros(dim)
    } else {
        tree.children(v).fold(Vector::zeros(dim), |acc, c| acc + yj(c) * (tree.prob(c) * m.increment(tree, c))) / var
    };
    (mean, z)
}

fn solve_backward(tree: &TreeFiltration, spec: &BsdeSpec, budget: &ContractionBudget, cfg: &SolverConfig, sl: Slicing, norm: BackwardNorm, bounds: Vec<Option<f64>>) -> Result<Outcome<BsdeSolution>> {
    let dim = spec.dim;
    let n = tree.n_nodes();
    let j = &spec.forcing;
    let cov12 = step_covariation(tree, &spec.n1, &spec.n2);
    let mut y = vec![Vector::zeros(dim); n];
    let mut z = vec![Vector::zeros(dim); n];
    for (k, l) in tree.leaves().enumerate() {
        y[l] = spec.terminal[k].clone();
    }
    let mut logs = Vec::new();
    for i in (0..sl.count).rev() {
        let in_slice: Vec<usize> = tree.internal_nodes().rev().filter(|&v| sl.slice_of[v] == i).collect();
        for &v in &in_slice {
            y[v] = match cfg.initial {
                InitialGuess::Zero => Vector::zeros(dim),
                InitialGuess::Forcing => j[v].clone(),
            };
            z[v] = Vector::zeros(dim);
        }
        let mut log = SliceLog { slice: i, iterations: 0, converged: in_slice.is_empty(), distances: vec![], ratios: vec![], max_ratio: None, bound: bounds[i] };
        while !log.converged && log.iterations < cfg.max_iter {
            let (y_old, z_old) = (y.clone(), z.clone());
            for &v in &in_slice {
                let (mean, zv) = kw_step(tree, &spec.m, v, |c| &y[c] + &j[c], dim);
                let drift = spec.f.eval(v, &y_old[v], y_old[v].norm()) * cov12[v]
                    + (spec.gy.eval(v, &y_old[v], y_old[v].norm()) + spec.gz.eval(v, &z_old[v], z_old[v].norm())) * spec.m.step_bracket(tree, v);
                y[v] = mean - &j[v] + drift;
                z[v] = zv;
            }
            let dz: Vec<Vector> = z.iter().zip(&z_old).map(|(a, b)| a - b).collect();
            let dy: Vec<Vector> = y.iter().zip(&y_old).map(|(a, b)| a - b).collect();
            let (d, scale) = match norm {
                BackwardNorm::RpHp => (rp_vec(tree, &dy, spec.p) + hp_integral(tree, &dz, &spec.m, spec.p), rp_vec(tree, &y, spec.p)),
                BackwardNorm::Bmo => (bmo_integral(tree, &dz, &spec.m), bmo_integral(tree, &z, &spec.m)),
            };
            let ds = sup_diff(&y, &y_old).max(sup_diff(&z, &z_old));
            log.iterations += 1;
            push_distance(&mut log, d, scale);
            if d <= cfg.tol && ds <= cfg.tol {
                log.converged = true;
            }
        }
        let converged = log.converged;
        logs.push(log);
        if !converged {
            break;
        }
    }
    logs.reverse();
    let m_perp = orthogonal_part(tree, &spec.m, &y, &z, j, dim);
    let residual = bsde_residual(tree, spec, &y, &z, &m_perp);
    let orth = orthogonality(tree, &spec.m, &m_perp);
    let data = rp_vec(tree, j, spec.p) + {
        let t: Vec<f64> = spec.terminal.iter().map(|x| x.norm()).collect();
        let off = tree.leaves().start;
        tree.expect_leaves(|l| t[l - off].powf(spec.p)).powf(1.0 / spec.p)
    };
    let sol_norm = rp_vec(tree, &y, spec.p) + hp_integral(tree, &z, &spec.m, spec.p) + hp_vector_martingale(tree, &m_perp, spec.p);
    let apriori = if data > 0.0 { sol_norm / data } else { 0.0 };
    let report = summarize(budget.kind, budget, logs, sl, residual, Some(orth), apriori, cfg.tol);
    let solution = report.converged.then_some(BsdeSolution { y, z, m_perp });
    Ok(Outcome { solution, report })
}

/// ΔM^⊥(c) = (Y+J)(c) − E[(Y+J)(c) | v] − Z(v)ΔM(c), started at 0.
fn orthogonal_part(tree: &TreeFiltration, m: &TreeMartingale<f64>, y: &[Vector], z: &[Vector], j: &[Vector], dim: usize) -> Vec<Vector> {
    let mut out = vec![Vector::zeros(dim); tree.n_nodes()];
    for v in tree.internal_nodes() {
        let mean = tree.children(v).fold(Vector::zeros(dim), |acc, c| acc + (&y[c] + &j[c]) * tree.prob(c));
        for c in tree.children(v) {
            out[c] = &out[v] + &y[c] + &j[c] - &mean - &z[v] * m.increment(tree, c);
        }
    }
    out
}

fn hp_vector_martingale(tree: &TreeFiltration, x: &[Vector], p: f64) -> f64 {
    let mut b = vec![0.0; tree.n_nodes()];
    for v in tree.internal_nodes() {
        let s: f64 = tree.children(v).map(|c| tree.prob(c) * (&x[c] - &x[v]).norm_squared()).sum();
        for c in tree.children(v) {
            b[c] = b[v] + s;
        }
    }
    tree.expect_leaves(|l| b[l].powf(p / 2.0)).powf(1.0 / p)
}

/// max over nodes and components of |E[ΔM ΔM^⊥ | v]| and over leaves of |⟨M, M^⊥⟩_T|.
pub fn orthogonality(tree: &TreeFiltration, m: &TreeMartingale<f64>, m_perp: &[Vector]) -> f64 {
    let dim = m_perp.first().map_or(0, |x| x.len());
    let mut acc = vec![Vector::zeros(dim); tree.n_nodes()];
    let mut worst: f64 = 0.0;
    for v in tree.internal_nodes() {
        let s = tree.children(v).fold(Vector::zeros(dim), |a, c| a + (&m_perp[c] - &m_perp[v]) * (tree.prob(c) * m.increment(tree, c)));
        worst = worst.max(s.amax());
        for c in tree.children(v) {
            acc[c] = &acc[v] + &s;
        }
    }
    tree.leaves().fold(worst, |w, l| w.max(acc[l].amax()))
}

/// Largest node defect of the backward equation (Z recomputed from Y) and edge defect of the decomposition.
pub fn bsde_residual(tree: &TreeFiltration, spec: &BsdeSpec, y: &[Vector], z: &[Vector], m_perp: &[Vector]) -> f64 {
    let dim = spec.dim;
    let j = &spec.forcing;
    let cov12 = step_covariation(tree, &spec.n1, &spec.n2);
    let mut worst: f64 = 0.0;
    for (k, l) in tree.leaves().enumerate() {
        worst = worst.max((&y[l] - &spec.terminal[k]).norm());
    }
    for v in tree.internal_nodes() {
        let (mean, zv) = kw_step(tree, &spec.m, v, |c| &y[c] + &j[c], dim);
        let db = spec.m.step_bracket(tree, v);
        let f = spec.f.eval(v, &y[v], y[v].norm()) * cov12[v];
        let g = (spec.gy.eval(v, &y[v], y[v].norm()) + spec.gz.eval(v, &zv, zv.norm())) * db;
        worst = worst.max((&y[v] - (&mean - &j[v] + &f + &g)).norm());
        worst = worst.max((&zv - &z[v]).norm() * db.sqrt());
        for c in tree.children(v) {
            let rhs = &y[v] - (&j[c] - &j[v]) - &f - &g + &z[v] * spec.m.increment(tree, c) + (&m_perp[c] - &m_perp[v]);
            worst = worst.max((&y[c] - rhs).norm());
        }
    }
    worst
}

pub fn solve_bsde(tree: &TreeFiltration, spec: &BsdeSpec, budget: &ContractionBudget, cfg: &SolverConfig) -> Result<Outcome<BsdeSolution>> {
    spec.validate(tree)?;
    if !(spec.p > 1.0) {
        return Err(Error::InvalidExponent(spec.p));
    }
    let [n2, sb, gm] = bsde_targets(tree, spec)?;
    let sl = slicing(tree, vec![(n2, budget.eps1), (sb, budget.eps2), (gm, budget.eps3)])?;
    let bounds = vec![None; sl.count];
    solve_backward(tree, spec, budget, cfg, sl, BackwardNorm::RpHp, bounds)
}

/// Picard in the BMO norm of Z∘M for f = 0, J = 0, g = g(z); slices γ∘M at `budget.eps3`.
pub fn solve_bsde_bmo(tree: &TreeFiltration, spec: &BsdeSpec, budget: &ContractionBudget, cfg: &SolverConfig) -> Result<Outcome<BsdeSolution>> {
    spec.validate(tree)?;
    if !spec.is_bmo_form() {
        return Err(Error::Config("BMO variant needs f = 0, J = 0 and g independent of y".into()));
    }
    let gamma = spec.gz.envelope_process(tree, spec.dim);
    let (gm, _) = weighted_bmo(tree, &gamma, &spec.m)?;
    let sl = slicing(tree, vec![(gm.clone(), budget.eps3)])?;
    let bounds = (0..sl.count).map(|i| Some(SQRT_2 * bmo_norm(tree, &slice_part(tree, &gm, &sl.slice_of, i)).value)).collect();
    let spec_p = BsdeSpec { p: 2.0, ..spec.clone() };
    solve_backward(tree, &spec_p, budget, cfg, sl, BackwardNorm::Bmo, bounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub lambda: f64,
    /// sup over nodes of E[exp(λ|U_T − U_v|) | v]
    pub moment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundedDataReport {
    pub terminal_bound: f64,
    pub forcing_bound: f64,
    pub y_rinf: f64,
    /// BMO norm of U = Z∘M + M^⊥.
    pub u_bmo: f64,
    pub eps: f64,
    /// sup over nodes of E[exp(8ε(⟨U⟩_T − ⟨U⟩_v)) | v]
    pub bracket_moment: f64,
    /// 1/(1 − 8ε‖U‖²_BMO), present where 8ε‖U‖² < 1.
    pub bound: Option<f64>,
    pub within_bound: Option<bool>,
    pub moments: Vec<MomentRow>,
}

/// L^∞-data diagnostics of a BSDE solution.
pub fn bounded_data_diagnostics(tree: &TreeFiltration, spec: &BsdeSpec, sol: &BsdeSolution, eps: f64, lambdas: &[f64]) -> BoundedDataReport {
    let dim = spec.dim;
    let n = tree.n_nodes();
    // U = Z∘M + M^⊥, started at 0
    let mut u = vec![Vector::zeros(dim); n];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            u[c] = &u[v] + &sol.z[v] * spec.m.increment(tree, c) + (&sol.m_perp[c] - &sol.m_perp[v]);
        }
    }
    let mut step = vec![0.0; n];
    for v in tree.internal_nodes() {
        step[v] = tree.children(v).map(|c| tree.prob(c) * (&u[c] - &u[v]).norm_squared()).sum();
    }
    let mut g = vec![0.0; n];
    for v in tree.internal_nodes().rev() {
        g[v] = step[v] + tree.child_mean(v, |c| g[c]);
    }
    let u_bmo = g.iter().copied().fold(0.0, f64::max).sqrt();
    // remaining bracket from v along each path, as a leaf functional per start node
    let lam = 8.0 * eps;
    let bracket_moment = sup_conditional(tree, |v, l| {
        let mut s = 0.0;
        let mut w = l;
        while w != v {
            let par = tree.parent(w).expect("below v");
            s += step[par];
            w = par;
        }
        (lam * s).exp()
    });
    let moments = lambdas.iter().map(|&la| MomentRow { lambda: la, moment: sup_conditional(tree, |v, l| (la * (&u[l] - &u[v]).norm()).exp()) }).collect();
    let k = lam * u_bmo * u_bmo;
    let bound = (k < 1.0).then(|| 1.0 / (1.0 - k));
    BoundedDataReport {
        terminal_bound: spec.terminal.iter().map(|x| x.norm()).fold(0.0, f64::max),
        forcing_bound: spec.forcing.iter().map(|x| x.norm()).fold(0.0, f64::max),
        y_rinf: sol.y.iter().map(|x| x.norm()).fold(0.0, f64::max),
        u_bmo,
        eps,
        bracket_moment,
        bound,
        within_bound: bound.map(|b| bracket_moment <= b * (1.0 + 1e-12)),
        moments,
    }
}

/// max over nodes v of E[h(v, leaf) | v].
fn sup_conditional(tree: &TreeFiltration, h: impl Fn(usize, usize) -> f64) -> f64 {
    let mut best: f64 = 0.0;
    for v in 0..tree.n_nodes() {
        // leaves below v are a contiguous range at the last level
        let depth = tree.depth();
        let lv = tree.level(v);
        let b = tree.branching();
        let first = {
            let mut w = v;
            for _ in lv..depth {
                w = tree.children(w).start;
            }
            w
        };
        let count = b.pow((depth - lv) as u32);
        let mut e = 0.0;
        for l in first..first + count {
            e += tree.abs_prob(l) / tree.abs_prob(v) * h(v, l);
        }
        best = best.max(e);
    }
    best
}
