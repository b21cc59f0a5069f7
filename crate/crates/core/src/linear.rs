//! Linear matrix SDEs and BSDEs on trees: fundamental solutions, explicit
//! solution formulas, change of measure and reverse Hölder checks.
//!
//! Matrix norms are the operator 2-norm unless noted; matrix-valued
//! martingales use the Frobenius norm for their brackets.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bmo::{bmo_norm, check_p};
use crate::error::{Error, Result};
use crate::corpus::{random_tree, rng, Generator};
use crate::solvers::{budget_bsde, feasible_levels, min_slice_levels_bsde, solve_bsde, BsdeSolution, BsdeSpec, Coefficient, ContractionBudget, SolverConfig};
use crate::tree::{step_covariation, TreeFiltration, TreeMartingale, TreeStoppingTime, DEGENERATE_VARIANCE};

pub type Matrix = DMatrix<f64>;
pub use crate::solvers::Vector;

pub fn op_norm(a: &Matrix) -> f64 {
    match a.shape() {
        (0, _) | (_, 0) => return 0.0,
        (1, 1) => return a[(0, 0)].abs(),
        _ => {}
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Drivers of dS = [A d⟨N₁,N₂⟩ + B d⟨M⟩ + D dM] S, matrices per node (read at the parent).
#[derive(Debug, Clone)]
pub struct Drivers {
    pub dim: usize,
    pub a: Vec<Matrix>,
    pub b: Vec<Matrix>,
    pub d: Vec<Matrix>,
    pub n1: TreeMartingale<f64>,
    pub n2: TreeMartingale<f64>,
    pub m: TreeMartingale<f64>,
}

impl Drivers {
    /// dS = A S dM.
    pub fn homogeneous(tree: &TreeFiltration, a: Vec<Matrix>, m: TreeMartingale<f64>) -> Result<Self> {
        let dim = a.first().map_or(0, |x| x.nrows());
        if a.len() != tree.n_nodes() {
            return Err(Error::Dimension { expected: tree.n_nodes(), got: a.len() });
        }
        let zero = vec![Matrix::zeros(dim, dim); tree.n_nodes()];
        Ok(Drivers { dim, a: zero.clone(), b: zero, d: a, n1: TreeMartingale::zero(tree), n2: TreeMartingale::zero(tree), m })
    }

    /// Scalar A given per node.
    pub fn scalar(tree: &TreeFiltration, a: &[f64], m: TreeMartingale<f64>) -> Result<Self> {
        Drivers::homogeneous(tree, a.iter().map(|&x| Matrix::from_element(1, 1, x)).collect(), m)
    }

    fn validate(&self, tree: &TreeFiltration) -> Result<()> {
        for set in [&self.a, &self.b, &self.d] {
            if set.len() != tree.n_nodes() {
                return Err(Error::Dimension { expected: tree.n_nodes(), got: set.len() });
            }
            if let Some(x) = set.iter().find(|x| x.nrows() != self.dim || x.ncols() != self.dim) {
                return Err(Error::Dimension { expected: self.dim, got: x.nrows().max(x.ncols()) });
            }
        }
        Ok(())
    }

    /// The coefficient of ΔM, the only driver the explicit formulas use.
    pub fn dm_coefficient(&self) -> &[Matrix] {
        &self.d
    }
}

#[derive(Debug, Clone)]
pub struct FundamentalSolution {
    pub dim: usize,
    pub s: Vec<Matrix>,
    pub s_inv: Vec<Matrix>,
    /// One-step factor per non-root node c: S(c) = F(c)·S(parent).
    pub factor: Vec<Matrix>,
}

pub fn fundamental(tree: &TreeFiltration, drv: &Drivers) -> Result<FundamentalSolution> {
    drv.validate(tree)?;
    let n = drv.dim;
    let id = Matrix::identity(n, n);
    let cov = step_covariation(tree, &drv.n1, &drv.n2);
    let mut s = vec![id.clone(); tree.n_nodes()];
    let mut s_inv = vec![id.clone(); tree.n_nodes()];
    let mut factor = vec![id.clone(); tree.n_nodes()];
    for v in tree.internal_nodes() {
        let base = &id + &drv.a[v] * cov[v] + &drv.b[v] * drv.m.step_bracket(tree, v);
        for c in tree.children(v) {
            let f = &base + &drv.d[v] * drv.m.increment(tree, c);
            let fi = f.clone().try_inverse().ok_or(Error::Singular { node: c })?;
            s[c] = &f * &s[v];
            s_inv[c] = &s_inv[v] * fi;
            factor[c] = f;
        }
    }
    // re-invert the accumulated product per node
    for v in 1..tree.n_nodes() {
        s_inv[v] = s[v].clone().try_inverse().ok_or(Error::Singular { node: v })?;
    }
    Ok(FundamentalSolution { dim: n, s, s_inv, factor })
}

impl FundamentalSolution {
    /// max over nodes of |S·S_inv − I|.
    pub fn inverse_defect(&self) -> f64 {
        let id = Matrix::identity(self.dim, self.dim);
        self.s.iter().zip(&self.s_inv).map(|(a, b)| (a * b - &id).amax()).fold(0.0, f64::max)
    }

    /// max over edges of |S(c) − F(c)S(v)|.
    pub fn recursion_defect(&self, tree: &TreeFiltration) -> f64 {
        let mut w: f64 = 0.0;
        for v in tree.internal_nodes() {
            for c in tree.children(v) {
                w = w.max((&self.s[c] - &self.factor[c] * &self.s[v]).amax());
            }
        }
        w
    }

    /// S(t, s) = product of one-step factors from `from` (exclusive) down to `to` (inclusive).
    pub fn transition(&self, tree: &TreeFiltration, from: usize, to: usize) -> Matrix {
        let mut out = Matrix::identity(self.dim, self.dim);
        let mut w = to;
        while w != from {
            out = &out * &self.factor[w];
            w = tree.parent(w).expect("`from` must be an ancestor of `to`");
        }
        out
    }
}

/// Largest conditional-mean gap per node between the exact one-step inverse
/// (I + AΔM)^{-1} and the continuous inverse-SDE step I − AΔM + A²Δ⟨M⟩.
pub fn inverse_sde_gap(tree: &TreeFiltration, drv: &Drivers) -> f64 {
    let n = drv.dim;
    let id = Matrix::identity(n, n);
    let mut worst: f64 = 0.0;
    for v in tree.internal_nodes() {
        let a = &drv.d[v];
        let a2 = a * a;
        let db = drv.m.step_bracket(tree, v);
        let mut gap = Matrix::zeros(n, n);
        for c in tree.children(v) {
            let dm = drv.m.increment(tree, c);
            let exact = match (&id + a * dm).try_inverse() {
                Some(x) => x,
                None => return f64::INFINITY,
            };
            let approx = &id - a * dm + &a2 * db;
            gap += (exact - approx) * tree.prob(c);
        }
        worst = worst.max(op_norm(&gap));
    }
    worst
}

/// sup over nodes v of E[max_{t ≥ v} |S(v)^{-1} S(t)|^p | v].
pub fn check_fundamental_rp(tree: &TreeFiltration, fs: &FundamentalSolution, p: f64) -> Result<f64> {
    check_p(p)?;
    if p.is_infinite() {
        return Err(Error::InvalidExponent(p));
    }
    let mut best: f64 = 0.0;
    for v in 0..tree.n_nodes() {
        best = best.max(subtree_max_moment(tree, fs, v, p));
    }
    Ok(best)
}

fn subtree_max_moment(tree: &TreeFiltration, fs: &FundamentalSolution, v: usize, p: f64) -> f64 {
    // S(v)^{-1}S(t) = S(v)^{-1} F(t) … F(v+1) S(v); accumulate the transition from the left
    fn walk(tree: &TreeFiltration, fs: &FundamentalSolution, root: usize, v: usize, trans: &Matrix, run: f64, w: f64, p: f64) -> f64 {
        let val = op_norm(&(&fs.s_inv[root] * trans * &fs.s[root]));
        let run = run.max(val);
        if tree.is_leaf(v) {
            return w * run.powf(p);
        }
        tree.children(v).map(|c| walk(tree, fs, root, c, &(&fs.factor[c] * trans), run, w * tree.prob(c), p)).sum()
    }
    walk(tree, fs, v, v, &Matrix::identity(fs.dim, fs.dim), 0.0, 1.0, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub p: f64,
    /// sup over nodes of E[|S(T)S(v)^{-1}|^p | v]
    pub value: f64,
    pub root: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationScan {
    pub rows: Vec<ScanRow>,
    pub finite: bool,
    /// value^{1/p} nondecreasing along the grid
    pub monotone: bool,
}

/// Reverse Hölder constant of S in the form sup_v E[|S(T)S(v)^{-1}|^p | v].
pub fn reverse_holder_matrix(tree: &TreeFiltration, fs: &FundamentalSolution, p: f64) -> Result<f64> {
    check_p(p)?;
    let mut best: f64 = 0.0;
    for v in 0..tree.n_nodes() {
        let x = tree.leaves().filter(|&l| is_descendant(tree, v, l)).map(|l| tree.abs_prob(l) * op_norm(&(&fs.s[l] * &fs.s_inv[v])).powf(p)).sum::<f64>() / tree.abs_prob(v);
        best = best.max(x);
    }
    Ok(best)
}

fn is_descendant(tree: &TreeFiltration, v: usize, mut w: usize) -> bool {
    while tree.level(w) > tree.level(v) {
        w = tree.parent(w).unwrap();
    }
    w == v
}

pub fn continuation_scan(tree: &TreeFiltration, fs: &FundamentalSolution, p_grid: &[f64]) -> Result<ContinuationScan> {
    let mut rows = Vec::new();
    for &p in p_grid {
        let value = reverse_holder_matrix(tree, fs, p)?;
        rows.push(ScanRow { p, value, root: value.powf(1.0 / p) });
    }
    let finite = rows.iter().all(|r| r.value.is_finite());
    let monotone = rows.windows(2).all(|w| w[0].p > w[1].p || w[1].root >= w[0].root * (1.0 - 1e-12));
    Ok(ContinuationScan { rows, finite, monotone })
}

#[derive(Debug, Clone)]
pub struct LinearBsdeSolution {
    pub y: Vec<Vector>,
    pub z: Vec<Vector>,
    pub m_perp: Vec<Vector>,
}

impl From<LinearBsdeSolution> for BsdeSolution {
    fn from(s: LinearBsdeSolution) -> Self {
        BsdeSolution { y: s.y, z: s.z, m_perp: s.m_perp }
    }
}

/// Solves Y(v) = E[(I + AᵀΔM) Y(c) | v] + f(v)Δt, Y = ξ at the leaves, through
/// Sᵀ(v)Y(v) = E[Sᵀ(T)ξ + Σ_{u ≥ v} Sᵀ(u) f(u) Δt | v]. Z and M^⊥ come from the
/// decomposition of Y against M.
pub fn solve_linear_bsde_explicit(tree: &TreeFiltration, drv: &Drivers, xi: &[Vector], f: &[Vector]) -> Result<LinearBsdeSolution> {
    let fs = fundamental(tree, drv)?;
    let n = drv.dim;
    let dt = tree.time_step();
    if xi.len() != tree.n_leaves() {
        return Err(Error::Dimension { expected: tree.n_leaves(), got: xi.len() });
    }
    if f.len() != tree.n_nodes() {
        return Err(Error::Dimension { expected: tree.n_nodes(), got: f.len() });
    }
    let mut q = vec![Vector::zeros(n); tree.n_nodes()];
    let off = tree.leaves().start;
    for l in tree.leaves() {
        q[l] = fs.s[l].transpose() * &xi[l - off];
    }
    for v in tree.internal_nodes().rev() {
        let mean = tree.children(v).fold(Vector::zeros(n), |acc, c| acc + &q[c] * tree.prob(c));
        q[v] = mean + fs.s[v].transpose() * &f[v] * dt;
    }
    let y: Vec<Vector> = (0..tree.n_nodes()).map(|v| fs.s_inv[v].transpose() * &q[v]).collect();
    let mut z = vec![Vector::zeros(n); tree.n_nodes()];
    let mut m_perp = vec![Vector::zeros(n); tree.n_nodes()];
    for v in tree.internal_nodes() {
        let var = drv.m.step_bracket(tree, v);
        let mean = tree.children(v).fold(Vector::zeros(n), |acc, c| acc + &y[c] * tree.prob(c));
        if var > DEGENERATE_VARIANCE {
            z[v] = tree.children(v).fold(Vector::zeros(n), |acc, c| acc + &y[c] * (tree.prob(c) * drv.m.increment(tree, c))) / var;
        }
        for c in tree.children(v) {
            m_perp[c] = &m_perp[v] + &y[c] - &mean - &z[v] * drv.m.increment(tree, c);
        }
    }
    Ok(LinearBsdeSolution { y, z, m_perp })
}

/// The same linear BSDE in the general solver's form: generator Aᵀz, forcing
/// J(v) = Σ_{u < v} f(u)Δt.
pub fn linear_bsde_spec(tree: &TreeFiltration, drv: &Drivers, xi: &[Vector], f: &[Vector], p: f64) -> BsdeSpec {
    let n = drv.dim;
    let dt = tree.time_step();
    let mut j = vec![Vector::zeros(n); tree.n_nodes()];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            j[c] = &j[v] + &f[v] * dt;
        }
    }
    BsdeSpec {
        dim: n,
        p,
        terminal: xi.to_vec(),
        forcing: j,
        f: Coefficient::Zero,
        gy: Coefficient::Zero,
        gz: Coefficient::Matrix(drv.d.iter().map(|a| a.transpose()).collect()),
        n1: TreeMartingale::zero(tree),
        n2: TreeMartingale::zero(tree),
        m: drv.m.clone(),
    }
}

/// Seeded linear BSDE data: random tree, D = scale·U(−1,1) entries (divided by √dim), ξ and f in [−1, 1].
#[derive(Debug, Clone)]
pub struct LinearCase {
    pub tree: TreeFiltration,
    pub drivers: Drivers,
    pub xi: Vec<Vector>,
    pub f: Vec<Vector>,
}

pub fn random_linear_case(seed: u64, depth: usize, branching: usize, dim: usize, scale: f64) -> Result<LinearCase> {
    let (tree, m) = random_tree(seed, depth, branching, Generator::Uniform)?;
    let mut r = rng(seed ^ 0x11_2EA5);
    let root = (dim as f64).sqrt();
    let a: Vec<Matrix> = (0..tree.n_nodes()).map(|_| Matrix::from_fn(dim, dim, |_, _| scale * r.gen_range(-1.0..1.0) / root)).collect();
    let drivers = Drivers::homogeneous(&tree, a, m)?;
    let xi = (0..tree.n_leaves()).map(|_| Vector::from_fn(dim, |_, _| r.gen_range(-1.0..1.0))).collect();
    let f = (0..tree.n_nodes()).map(|_| Vector::from_fn(dim, |_, _| r.gen_range(-1.0..1.0))).collect();
    Ok(LinearCase { tree, drivers, xi, f })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplicitComparison {
    pub budget: ContractionBudget,
    pub converged: bool,
    pub slice_count: usize,
    /// max |Y_explicit − Y_picard|
    pub y_gap: f64,
    /// max |(z_explicit − z_picard)|·√Δ⟨M⟩: Z only matters where M moves.
    pub zm_gap: f64,
    pub m_perp_gap: f64,
}

/// Explicit solution against the sliced Picard solver at slice level `eps`.
pub fn compare_explicit_picard(case: &LinearCase, p: f64, eps: f64, cfg: &SolverConfig) -> Result<ExplicitComparison> {
    let t = &case.tree;
    let ex = solve_linear_bsde_explicit(t, &case.drivers, &case.xi, &case.f)?;
    let spec = linear_bsde_spec(t, &case.drivers, &case.xi, &case.f, p);
    let eps = feasible_levels([eps], [min_slice_levels_bsde(t, &spec)?[2]])[0];
    let budget = budget_bsde(t, &spec, 0.0, 0.0, eps, 2.0)?;
    let out = solve_bsde(t, &spec, &budget, cfg)?;
    let slice_count = out.report.slice_count;
    let converged = out.report.converged;
    let (mut y_gap, mut zm_gap, mut m_perp_gap) = (f64::NAN, f64::NAN, f64::NAN);
    if let Some(sol) = out.solution {
        let m = &case.drivers.m;
        y_gap = ex.y.iter().zip(&sol.y).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        zm_gap = t.internal_nodes().map(|v| (&ex.z[v] - &sol.z[v]).amax() * m.step_bracket(t, v).sqrt()).fold(0.0, f64::max);
        m_perp_gap = ex.m_perp.iter().zip(&sol.m_perp).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    }
    Ok(ExplicitComparison { budget, converged, slice_count, y_gap, zm_gap, m_perp_gap })
}

#[derive(Debug, Clone)]
pub struct GirsanovRecord {
    /// Density process of Q, a positive P-martingale.
    pub density: Vec<f64>,
    /// Tilted transition probabilities per non-root node.
    pub q_probs: Vec<f64>,
    /// M^Q = M − ⟨a∘M, M⟩.
    pub m_q: Vec<f64>,
    /// V^Q = V − ⟨a∘M, V⟩ for each target.
    pub targets_q: Vec<Vec<f64>>,
    /// max |E_Q[ΔX | v]| over nodes for M^Q and every target.
    pub audit: f64,
    /// BMO norm of M^Q under Q.
    pub m_q_bmo: f64,
}

/// Change of measure with density E(a∘M), scalar a per node.
pub fn girsanov(tree: &TreeFiltration, a: &[f64], m: &TreeMartingale<f64>, targets: &[TreeMartingale<f64>]) -> Result<GirsanovRecord> {
    if a.len() != tree.n_nodes() {
        return Err(Error::Dimension { expected: tree.n_nodes(), got: a.len() });
    }
    let mut density = vec![1.0; tree.n_nodes()];
    let mut q_probs = vec![1.0; tree.n_nodes()];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            let k = 1.0 + a[v] * m.increment(tree, c);
            if !(k > 0.0) {
                return Err(Error::NonPositive { index: c, value: k });
            }
            density[c] = density[v] * k;
            q_probs[c] = tree.prob(c) * k;
        }
    }
    let transform = |x: &TreeMartingale<f64>| -> Vec<f64> {
        let cov = step_covariation(tree, m, x);
        let mut out = x.values().to_vec();
        let mut drift = vec![0.0; tree.n_nodes()];
        for v in tree.internal_nodes() {
            for c in tree.children(v) {
                drift[c] = drift[v] + a[v] * cov[v];
                out[c] -= drift[c];
            }
        }
        out
    };
    let m_q = transform(m);
    let targets_q: Vec<Vec<f64>> = targets.iter().map(transform).collect();
    let mut audit: f64 = 0.0;
    for x in std::iter::once(&m_q).chain(&targets_q) {
        for v in tree.internal_nodes() {
            let e: f64 = tree.children(v).map(|c| q_probs[c] * (x[c] - x[v])).sum();
            audit = audit.max(e.abs());
        }
    }
    let qtree = TreeFiltration::new(tree.depth(), tree.branching(), &q_probs[1..], Some(tree.time_step()))?;
    let m_q_bmo = bmo_norm(&qtree, &TreeMartingale::new(&qtree, m_q.clone())?).value;
    Ok(GirsanovRecord { density, q_probs, m_q, targets_q, audit, m_q_bmo })
}

impl GirsanovRecord {
    /// E_P[density_T · x] and E_Q[x] for a leaf functional.
    pub fn expectations(&self, tree: &TreeFiltration, x: impl Fn(usize) -> f64) -> (f64, f64) {
        let ep = tree.expect_leaves(|l| self.density[l] * x(l));
        let mut qabs = vec![1.0; tree.n_nodes()];
        for v in tree.internal_nodes() {
            for c in tree.children(v) {
                qabs[c] = qabs[v] * self.q_probs[c];
            }
        }
        let eq = tree.leaves().map(|l| qabs[l] * x(l)).sum();
        (ep, eq)
    }
}

/// Solves X(c) = X(v) + A(v)X(v)ΔM(c) + ΔV(c), X(root) = 0, for matrix-valued
/// V (columns are independent right-hand sides), through
/// X = S Σ S(c)^{-1}ΔV(c), where S(c)^{-1}ΔV(c) = S(v)^{-1}(I + AΔM)^{-1}ΔV(c)
/// is the tree form of S^{-1}dV^Q.
pub fn solve_linear_sde(tree: &TreeFiltration, drv: &Drivers, v: &[Matrix]) -> Result<Vec<Matrix>> {
    if v.len() != tree.n_nodes() {
        return Err(Error::Dimension { expected: tree.n_nodes(), got: v.len() });
    }
    let fs = fundamental(tree, drv)?;
    let cols = v[0].ncols();
    let mut acc = vec![Matrix::zeros(drv.dim, cols); tree.n_nodes()];
    let mut x = vec![Matrix::zeros(drv.dim, cols); tree.n_nodes()];
    for p in tree.internal_nodes() {
        for c in tree.children(p) {
            let step = fs.factor[c].clone().try_inverse().ok_or(Error::Singular { node: c })?;
            acc[c] = &acc[p] + &fs.s_inv[p] * step * (&v[c] - &v[p]);
            x[c] = &fs.s[c] * &acc[c];
        }
    }
    Ok(x)
}

/// max over edges of |X(c) − (I + AΔM)X(v) − ΔV(c)|.
pub fn linear_sde_residual(tree: &TreeFiltration, drv: &Drivers, v: &[Matrix], x: &[Matrix]) -> f64 {
    let id = Matrix::identity(drv.dim, drv.dim);
    let mut w = x[0].amax();
    for p in tree.internal_nodes() {
        for c in tree.children(p) {
            let rhs = (&id + &drv.d[p] * drv.m.increment(tree, c)) * &x[p] + (&v[c] - &v[p]);
            w = w.max((&x[c] - rhs).amax());
        }
    }
    w
}

/// ‖X‖_{H^p} of a matrix-valued adapted process (Frobenius bracket of increments).
pub fn matrix_hp(tree: &TreeFiltration, x: &[Matrix], p: f64) -> f64 {
    let mut b = vec![0.0; tree.n_nodes()];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            b[c] = b[v] + (&x[c] - &x[v]).norm_squared();
        }
    }
    tree.expect_leaves(|l| b[l].powf(p / 2.0)).powf(1.0 / p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhiProbe {
    /// max over leaves of |X_T − χ_B(S(T)S(σ)^{-1} − I)|
    pub identity_gap: f64,
    /// ‖X_T‖_{L^p} (Frobenius)
    pub x_lp: f64,
    /// ‖V‖_{H^p}
    pub v_hp: f64,
    pub ratio: f64,
    pub p_b: f64,
}

/// Runs the linear SDE with V = χ_{[σ,T]}χ_B A∘M and compares X_T with χ_B(S(T)S(σ)^{-1} − I).
/// `event` flags the stopping nodes of σ that belong to B.
pub fn rhi_probe(tree: &TreeFiltration, drv: &Drivers, sigma: &TreeStoppingTime, event: &[bool], p: f64) -> Result<RhiProbe> {
    check_p(p)?;
    if event.len() != tree.n_nodes() {
        return Err(Error::Dimension { expected: tree.n_nodes(), got: event.len() });
    }
    let n = drv.dim;
    // active(v): σ ≤ level(v) and the stop node lies in B
    let active: Vec<Option<usize>> = (0..tree.n_nodes()).map(|v| sigma.stop_node_before(tree, v).filter(|&s| event[s])).collect();
    let mut v = vec![Matrix::zeros(n, n); tree.n_nodes()];
    for u in tree.internal_nodes() {
        for c in tree.children(u) {
            v[c] = if active[u].is_some() { &v[u] + &drv.d[u] * drv.m.increment(tree, c) } else { v[u].clone() };
        }
    }
    let x = solve_linear_sde(tree, drv, &v)?;
    let fs = fundamental(tree, drv)?;
    let id = Matrix::identity(n, n);
    let mut gap: f64 = 0.0;
    for l in tree.leaves() {
        let expect = match active[l] {
            Some(s) => &fs.s[l] * &fs.s_inv[s] - &id,
            None => Matrix::zeros(n, n),
        };
        gap = gap.max((&x[l] - expect).amax());
    }
    let p_b = tree.expect_leaves(|l| if active[l].is_some() { 1.0 } else { 0.0 });
    let x_lp = tree.expect_leaves(|l| x[l].norm().powf(p)).powf(1.0 / p);
    let v_hp = matrix_hp(tree, &v, p);
    let ratio = if v_hp > 0.0 { x_lp / v_hp } else { 0.0 };
    Ok(RhiProbe { identity_gap: gap, x_lp, v_hp, ratio, p_b })
}

/// A random stopping time (each internal node flagged with probability `rate`) and a random event in F_σ.
pub fn random_probe(tree: &TreeFiltration, r: &mut impl Rng, rate: f64) -> (TreeStoppingTime, Vec<bool>) {
    let flags: Vec<bool> = (0..tree.n_nodes()).map(|v| v > 0 && r.gen_bool(rate)).collect();
    let sigma = TreeStoppingTime::first_hit(tree, |v| flags[v]);
    let event = (0..tree.n_nodes()).map(|_| r.gen_bool(0.5)).collect();
    (sigma, event)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{random_tree, Generator};

    #[test]
    fn zero_drivers_give_identity() {
        let (t, m) = random_tree(1, 3, 2, Generator::Uniform).unwrap();
        let drv = Drivers::homogeneous(&t, vec![Matrix::zeros(2, 2); t.n_nodes()], m).unwrap();
        let fs = fundamental(&t, &drv).unwrap();
        assert!(fs.s.iter().all(|s| *s == Matrix::identity(2, 2)));
        assert!((check_fundamental_rp(&t, &fs, 3.0).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn scalar_product_oracle() {
        let (t, m) = random_tree(2, 4, 3, Generator::Coin).unwrap();
        let a = 0.3;
        let drv = Drivers::scalar(&t, &vec![a; t.n_nodes()], m.clone()).unwrap();
        let fs = fundamental(&t, &drv).unwrap();
        for l in t.leaves() {
            let path = t.path(l);
            let prod: f64 = path.windows(2).map(|w| 1.0 + a * (m.value(w[1]) - m.value(w[0]))).product();
            assert!((fs.s[l][(0, 0)] - prod).abs() < 1e-12);
        }
        assert!(fs.inverse_defect() < 1e-12);
    }
}
