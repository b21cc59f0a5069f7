//! The integral operator φ(X) = X∘M: exact matrices on trees, power-norm
//! estimates on paths, resolvent identities and the exponent/radius window.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bmo::{check_p, norm_hp};
use crate::corpus::rng;
use crate::error::{Error, Result};
use crate::exponent::{doubling_diagnostic, estimate_tree, DoublingDiagnostic, ExponentName, ExponentReport};
use crate::mc::{mean_se, BarrierRule, Integrand, MartingaleSpec, Monitor, PathEnsemble, TimeGrid};
use crate::tree::{TreeFiltration, TreeMartingale, TreeStoppingTime};

/// φ in an H²-orthonormal basis of martingales started at 0. Basis element
/// (v, j) moves only on the step out of node v.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    pub matrix: DMatrix<f64>,
    /// (node, direction) per basis element
    pub basis: Vec<(usize, usize)>,
    /// increments per child of the basis node, already scaled by 1/√P(node)
    vectors: Vec<Vec<f64>>,
    /// first basis index of each internal node
    offset: Vec<usize>,
    pub depth: usize,
}

/// Mean-zero directions at v, orthonormal for Σ_c p(c)u(c)w(c).
fn local_basis(tree: &TreeFiltration, v: usize) -> Vec<Vec<f64>> {
    let q: Vec<f64> = tree.children(v).map(|c| tree.prob(c)).collect();
    let b = q.len();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).zip(&q).map(|((a, b), w)| a * b * w).sum::<f64>();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for j in 1..b {
        let mut u: Vec<f64> = (0..b).map(|i| if i == j { 1.0 } else { 0.0 } - q[j]).collect();
        for e in &out {
            let k = dot(&u, e);
            u.iter_mut().zip(e).for_each(|(x, y)| *x -= k * y);
        }
        let nrm = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|x| *x /= nrm);
        out.push(u);
    }
    out
}

pub fn operator_matrix(tree: &TreeFiltration, m: &TreeMartingale<f64>) -> OperatorMatrix {
    let b = tree.branching();
    let mut basis = Vec::new();
    let mut vectors = Vec::new();
    let mut offset = vec![0; tree.n_nodes()];
    for v in tree.internal_nodes() {
        offset[v] = basis.len();
        let s = 1.0 / tree.abs_prob(v).sqrt();
        for (j, u) in local_basis(tree, v).into_iter().enumerate() {
            basis.push((v, j));
            vectors.push(u.into_iter().map(|x| x * s).collect::<Vec<f64>>());
        }
    }
    let d = basis.len();
    let mut om = OperatorMatrix { matrix: DMatrix::zeros(d, d), basis, vectors, offset, depth: tree.depth() };
    // coordinates of M's increments at each node
    let gamma = om.coordinates(tree, m);
    let cols: Vec<Vec<(usize, f64)>> = (0..d)
        .into_par_iter()
        .map(|col| {
            let (u, k) = om.basis[col];
            let mut entries = Vec::new();
            for (ci, c) in tree.children(u).enumerate() {
                let xval = om.vectors[col][ci];
                // every internal node in the subtree of c sees X = xval
                let mut frontier = vec![c];
                while let Some(w) = frontier.pop() {
                    if tree.is_leaf(w) {
                        continue;
                    }
                    for j in 0..b - 1 {
                        let row = om.offset[w] + j;
                        entries.push((row, xval * gamma[row]));
                    }
                    frontier.extend(tree.children(w));
                }
            }
            let _ = k;
            entries
        })
        .collect();
    for (col, entries) in cols.into_iter().enumerate() {
        for (row, x) in entries {
            om.matrix[(row, col)] = x;
        }
    }
    om
}

impl OperatorMatrix {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// H² coordinates of X − X₀.
    pub fn coordinates(&self, tree: &TreeFiltration, x: &TreeMartingale<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.basis.iter().zip(&self.vectors).map(|(&(v, _), e)| {
                let pv = tree.abs_prob(v);
                tree.children(v).enumerate().map(|(i, c)| pv * tree.prob(c) * x.increment(tree, c) * e[i]).sum::<f64>()
            }),
        )
    }

    /// Martingale values (started at 0) with the given coordinates.
    pub fn reconstruct(&self, tree: &TreeFiltration, coords: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; tree.n_nodes()];
        for v in tree.internal_nodes() {
            let o = self.offset[v];
            let nb = tree.branching() - 1;
            for (i, c) in tree.children(v).enumerate() {
                out[c] = out[v] + (0..nb).map(|j| coords[o + j] * self.vectors[o + j][i]).sum::<f64>();
            }
        }
        out
    }

    pub fn power(&self, n: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::identity(d, d);
        for _ in 0..n {
            out = &self.matrix * out;
        }
        out
    }

    /// Smallest k with φ^k = 0 exactly.
    pub fn nilpotency_index(&self) -> Option<usize> {
        let d = self.dim();
        let mut pw = DMatrix::identity(d, d);
        for k in 0..=self.depth + 1 {
            if pw.iter().all(|&x| x == 0.0) {
                return Some(k);
            }
            pw = &self.matrix * pw;
        }
        None
    }

    /// Exact ‖φⁿ‖ on H².
    pub fn norm2(&self, n: usize) -> f64 {
        spectral_norm(&self.power(n))
    }

    /// Exact ‖φ̃ⁿ‖ on complex H².
    pub fn complex_norm2(&self, n: usize) -> f64 {
        let c = self.power(n).map(|x| Complex64::new(x, 0.0));
        if c.is_empty() {
            return 0.0;
        }
        c.svd(false, false).singular_values.max()
    }

    /// max |matrix·coords(X) − coords(X∘M)| over random martingales.
    pub fn audit(&self, tree: &TreeFiltration, m: &TreeMartingale<f64>, trials: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let x = crate::corpus::random_martingale(tree, &mut r);
            let coords = self.coordinates(tree, &x);
            let xv = self.reconstruct(tree, &coords);
            let mut y = vec![0.0; tree.n_nodes()];
            for v in tree.internal_nodes() {
                for c in tree.children(v) {
                    y[c] = y[v] + xv[v] * m.increment(tree, c);
                }
            }
            let direct = self.coordinates(tree, &TreeMartingale::unchecked(tree, y));
            let via = &self.matrix * coords;
            worst = worst.max((direct - via).amax());
        }
        worst
    }
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusReport {
    pub p: f64,
    pub radius: f64,
    /// ‖φⁿ‖ for n = 1, 2, … until the powers vanish
    pub norms: Vec<f64>,
    /// ‖φⁿ‖^{1/n}
    pub roots: Vec<f64>,
    pub nilpotency_index: Option<usize>,
    /// "exact" at p = 2, "ascent" (lower estimate) otherwise
    pub method: String,
    pub restarts: usize,
}

/// Spectral radius on a tree; the norm sequence is exact at p = 2 and a
/// multi-start ascent lower estimate otherwise.
pub fn spectral_radius_tree(tree: &TreeFiltration, opm: &OperatorMatrix, p: f64, restarts: usize, seed: u64) -> Result<RadiusReport> {
    check_p(p)?;
    if p.is_infinite() {
        return Err(Error::InvalidExponent(p));
    }
    let nil = opm.nilpotency_index();
    let last = nil.unwrap_or(opm.depth + 1).max(1);
    let exact = (p - 2.0).abs() < 1e-15;
    let mut norms = Vec::new();
    for n in 1..last {
        norms.push(if exact { opm.norm2(n) } else { ascent_norm(tree, opm, n, p, restarts, seed ^ n as u64) });
    }
    let roots: Vec<f64> = norms.iter().enumerate().map(|(i, x)| x.powf(1.0 / (i + 1) as f64)).collect();
    let radius = match nil {
        Some(_) => 0.0,
        None => roots.last().copied().unwrap_or(0.0),
    };
    Ok(RadiusReport { p, radius, norms, roots, nilpotency_index: nil, method: if exact { "exact".into() } else { "ascent".into() }, restarts })
}

fn hp_of(tree: &TreeFiltration, opm: &OperatorMatrix, x: &DVector<f64>, p: f64) -> f64 {
    let vals = opm.reconstruct(tree, x);
    norm_hp(tree, &TreeMartingale::unchecked(tree, vals), p).map(|r| r.value).unwrap_or(0.0)
}

/// Lower estimate of ‖φⁿ‖ on H^p by projected gradient ascent on the unit sphere.
fn ascent_norm(tree: &TreeFiltration, opm: &OperatorMatrix, n: usize, p: f64, restarts: usize, seed: u64) -> f64 {
    let d = opm.dim();
    if d == 0 {
        return 0.0;
    }
    let pw = opm.power(n);
    let ratio = |x: &DVector<f64>| {
        let den = hp_of(tree, opm, x, p);
        if den > 0.0 {
            hp_of(tree, opm, &(&pw * x), p) / den
        } else {
            0.0
        }
    };
    let mut r = rng(seed);
    let mut best: f64 = 0.0;
    for start in 0..restarts.max(1) {
        // first start: the top H² singular direction
        let mut x = if start == 0 {
            let svd = pw.clone().svd(false, true);
            let vt = svd.v_t.expect("requested");
            let k = svd.singular_values.imax();
            vt.row(k).transpose()
        } else {
            DVector::from_fn(d, |_, _| r.gen_range(-1.0..1.0))
        };
        x /= x.norm().max(1e-300);
        let mut f = ratio(&x);
        let mut step = 0.5;
        for _ in 0..60 {
            let h = 1e-6;
            let g = DVector::from_fn(d, |i, _| {
                let mut a = x.clone();
                let mut b = x.clone();
                a[i] += h;
                b[i] -= h;
                (ratio(&a) - ratio(&b)) / (2.0 * h)
            });
            let gn = g.norm();
            if !(gn > 1e-14) {
                break;
            }
            let mut moved = false;
            while step > 1e-8 {
                let mut y = &x + &g * (step / gn);
                y /= y.norm();
                let fy = ratio(&y);
                if fy > f {
                    x = y;
                    f = fy;
                    step *= 1.5;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        best = best.max(f);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralMcConfig {
    pub n_max: usize,
    /// probe integrands; the first is the constant (self) probe
    pub probes: usize,
    pub seed: u64,
    /// relative standard error above which the sequence is truncated
    pub max_rel_se: f64,
}

impl Default for SpectralMcConfig {
    fn default() -> Self {
        SpectralMcConfig { n_max: 8, probes: 4, seed: 7, max_rel_se: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSequence {
    pub label: String,
    /// ‖φⁿX‖_{H^p}, n = 0..
    pub norms: Vec<f64>,
    pub rel_se: Vec<f64>,
    /// (‖φⁿX‖/‖X‖)^{1/n}, n = 1..
    pub roots: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralMcReport {
    pub p: f64,
    pub n_used: usize,
    pub r_hat: f64,
    /// the same estimate at n = 1
    pub r_first: f64,
    pub sequences: Vec<ProbeSequence>,
    pub b_hat: Option<f64>,
    /// [√p/b̂, √(2p(2p−1))/b̂]
    pub window: Option<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// Probe integrand h(t, x) of the unscaled state, so that the family is the same for M and cM:
/// constant for j = 0, a seeded trigonometric profile otherwise.
#[derive(Debug, Clone, Copy)]
struct Probe {
    w: f64,
    phase: f64,
    slope: f64,
}

impl Probe {
    fn at(&self, t: f64, m: f64) -> f64 {
        (self.w * m + self.phase).cos() + self.slope * t
    }
}

pub fn bound_window(p: f64, b: f64) -> (f64, f64) {
    if b.is_infinite() {
        return (0.0, 0.0);
    }
    (p.sqrt() / b, (2.0 * p * (2.0 * p - 1.0)).sqrt() / b)
}

/// Lower-biased estimate of r_p from iterated integrals of probe integrands along paths.
pub fn spectral_radius_mc(ens: &PathEnsemble, p: f64, cfg: &SpectralMcConfig, b_hat: Option<f64>) -> Result<SpectralMcReport> {
    check_p(p)?;
    if p.is_infinite() || cfg.n_max == 0 || cfg.probes == 0 {
        return Err(Error::Config("need finite p, n_max ≥ 1 and at least one probe".into()));
    }
    let mut r = rng(cfg.seed);
    let probes: Vec<Option<Probe>> = (0..cfg.probes)
        .map(|j| if j == 0 { None } else { Some(Probe { w: r.gen_range(0.5..3.0), phase: r.gen_range(0.0..std::f64::consts::TAU), slope: r.gen_range(-1.0..1.0) }) })
        .collect();
    let levels = cfg.n_max + 1;
    let width = cfg.probes * levels;
    // per path: terminal bracket of each iterate, raised to p/2
    let per_path: Vec<Vec<f64>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut y = vec![0.0; width];
            let mut br = vec![0.0; width];
            let (mut pm, mut pq, mut px) = (0.0, 0.0, 0.0);
            ens.walk(i, &[Monitor::Every], |k, _, st| {
                let s = &st[0];
                let (m, q) = (ens.m_of(s), ens.qv_of(s));
                if k > 0 {
                    let (dm, dq) = (m - pm, q - pq);
                    if dq > 0.0 {
                        let t = ens.grid.time(k - 1);
                        for (j, pr) in probes.iter().enumerate() {
                            let h = pr.map_or(1.0, |pr| pr.at(t, px));
                            let o = j * levels;
                            for n in (1..levels).rev() {
                                br[o + n] += y[o + n - 1] * y[o + n - 1] * dq;
                                y[o + n] += y[o + n - 1] * dm;
                            }
                            br[o] += h * h * dq;
                            y[o] += h * dm;
                        }
                    }
                }
                pm = m;
                pq = q;
                px = s.x;
                s.stopped_at.is_none()
            });
            br.iter().map(|b| b.powf(p / 2.0)).collect()
        })
        .collect();
    let mut warnings = Vec::new();
    let mut sequences = Vec::new();
    let mut n_used = cfg.n_max;
    for j in 0..cfg.probes {
        let mut norms = Vec::new();
        let mut rel_se = Vec::new();
        for n in 0..levels {
            let col: Vec<f64> = per_path.iter().map(|row| row[j * levels + n]).collect();
            let (mu, se) = mean_se(&col);
            norms.push(mu.powf(1.0 / p));
            // delta method for the p-th root
            rel_se.push(if mu > 0.0 { se / (p * mu) } else { f64::INFINITY });
        }
        if let Some(bad) = (1..levels).find(|&n| rel_se[n] > cfg.max_rel_se) {
            n_used = n_used.min(bad - 1);
        }
        let roots = (1..levels).map(|n| (norms[n] / norms[0]).powf(1.0 / n as f64)).collect();
        sequences.push(ProbeSequence { label: if j == 0 { "self".into() } else { format!("trig{j}") }, norms, rel_se, roots });
    }
    if n_used < cfg.n_max {
        warnings.push(format!("sequence truncated at n = {n_used}: relative error above {}", cfg.max_rel_se));
    }
    let n_used = n_used.max(1);
    let pick = |n: usize| sequences.iter().map(|s| s.roots[n - 1]).filter(|x| x.is_finite()).fold(0.0, f64::max);
    let r_hat = pick(n_used);
    let r_first = pick(1);
    let window = b_hat.map(|b| bound_window(p, b));
    Ok(SpectralMcReport { p, n_used, r_hat, r_first, sequences, b_hat, window, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub p: f64,
    pub lower: f64,
    pub upper: f64,
    pub r_hat: f64,
    pub within_upper: bool,
    /// reported only
    pub above_lower: bool,
}

/// Point estimate from an exponent bracket: midpoint, +∞ when unbounded.
pub fn point_estimate(rep: &ExponentReport) -> f64 {
    match rep.hi {
        Some(hi) if !rep.infinite => 0.5 * (rep.lo + hi),
        _ => f64::INFINITY,
    }
}

pub fn bound_battery(ens: &PathEnsemble, b: &ExponentReport, p_list: &[f64], cfg: &SpectralMcConfig, tol: f64) -> Result<Vec<BoundRow>> {
    let bh = point_estimate(b);
    p_list
        .iter()
        .map(|&p| {
            let rep = spectral_radius_mc(ens, p, cfg, Some(bh))?;
            let (lower, upper) = bound_window(p, bh);
            Ok(BoundRow { p, lower, upper, r_hat: rep.r_hat, within_upper: rep.r_hat <= upper * (1.0 + tol), above_lower: rep.r_hat >= lower * (1.0 - tol) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventReport {
    pub lambda: (f64, f64),
    /// max |X_σ − χ_A(E_σ/E_τ − 1)| over non-excluded leaves
    pub identity_gap: f64,
    /// leaves whose exponential vanishes on the way
    pub excluded: usize,
    /// max over τ-nodes of E[|E_σ/E_τ|^p | F_τ]
    pub moment: f64,
    pub p: f64,
}

/// Discrete exponential Π(1 + λΔM), per node.
pub fn discrete_exponential(tree: &TreeFiltration, m: &TreeMartingale<f64>, lambda: Complex64) -> Vec<Complex64> {
    let mut e = vec![Complex64::new(1.0, 0.0); tree.n_nodes()];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            e[c] = e[v] * (1.0 + lambda * m.increment(tree, c));
        }
    }
    e
}

/// X = E·Σ E^{-1} λ g dM^λ with g = χ_A χ_{(τ,σ]}, compared with χ_A(E_σ/E_τ − 1).
/// `event` flags τ-stopping nodes in A.
pub fn resolvent_probe_tree(tree: &TreeFiltration, m: &TreeMartingale<f64>, lambda: Complex64, tau: &TreeStoppingTime, sigma: &TreeStoppingTime, event: &[bool], p: f64) -> Result<ResolventReport> {
    check_p(p)?;
    if !tau.precedes(tree, sigma) {
        return Err(Error::Config("τ must not exceed σ".into()));
    }
    let e = discrete_exponential(tree, m, lambda);
    let n = tree.n_nodes();
    let tau_at: Vec<Option<usize>> = (0..n).map(|v| tau.stop_node_before(tree, v)).collect();
    let sigma_at: Vec<Option<usize>> = (0..n).map(|v| sigma.stop_node_before(tree, v)).collect();
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    let mut dead = vec![false; n];
    for v in tree.internal_nodes() {
        let on = matches!(tau_at[v], Some(t) if event[t]) && sigma_at[v].is_none();
        for c in tree.children(v) {
            let f = 1.0 + lambda * m.increment(tree, c);
            dead[c] = dead[v] || f.norm() < 1e-300;
            acc[c] = acc[v];
            if on && !dead[c] {
                acc[c] += lambda * m.increment(tree, c) / (e[v] * f);
            }
        }
    }
    let mut gap: f64 = 0.0;
    let mut excluded = 0;
    for l in tree.leaves() {
        if dead[l] {
            excluded += 1;
            continue;
        }
        let s = sigma_at[l].expect("σ stops every path");
        let x = e[s] * acc[s];
        let expect = match tau_at[s] {
            Some(t) if event[t] => e[s] / e[t] - 1.0,
            _ => Complex64::new(0.0, 0.0),
        };
        gap = gap.max((x - expect).norm());
    }
    let mut moment: f64 = 0.0;
    for t in tau.stopping_nodes(tree) {
        if dead[t] {
            continue;
        }
        let mut num = 0.0;
        for l in tree.leaves().filter(|&l| tau_at[l] == Some(t) && !dead[l]) {
            let s = sigma_at[l].unwrap();
            num += tree.abs_prob(l) * (e[s] / e[t]).norm().powf(p);
        }
        moment = moment.max(num / tree.abs_prob(t));
    }
    Ok(ResolventReport { lambda: (lambda.re, lambda.im), identity_gap: gap, excluded, moment, p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventMcReport {
    pub lambda: (f64, f64),
    pub tau_index: usize,
    pub steps: usize,
    /// mean and standard error of |X_σ − χ_A(E_σ/E_τ − 1)| with the continuous-form exponential
    pub residual: (f64, f64),
    /// mean and standard error of |E_σ/E_τ|^p
    pub moment: (f64, f64),
    pub p: f64,
}

/// Euler recursion for X on paths, A = {M_τ ≥ 0}, σ the horizon (or the stop).
pub fn resolvent_probe_mc(ens: &PathEnsemble, lambda: Complex64, tau_index: usize, p: f64) -> Result<ResolventMcReport> {
    check_p(p)?;
    if tau_index > ens.grid.steps {
        return Err(Error::Config(format!("τ index {tau_index} beyond the grid ({} steps)", ens.grid.steps)));
    }
    let rows: Vec<(f64, f64)> = (0..ens.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut x = Complex64::new(0.0, 0.0);
            let (mut pm, mut pq) = (0.0, 0.0);
            let (mut mt, mut qt, mut in_a) = (0.0, 0.0, false);
            let (mut m_end, mut q_end) = (0.0, 0.0);
            ens.walk(i, &[Monitor::Every], |k, _, st| {
                let s = &st[0];
                let (m, q) = (ens.m_of(s), ens.qv_of(s));
                if k > tau_index && in_a {
                    x += lambda * x * (m - pm) + lambda * (m - pm);
                }
                if k == tau_index {
                    mt = m;
                    qt = q;
                    in_a = m >= 0.0;
                }
                pm = m;
                pq = q;
                m_end = m;
                q_end = q;
                s.stopped_at.is_none()
            });
            let _ = pq;
            let ratio = (lambda * (m_end - mt) - 0.5 * lambda * lambda * (q_end - qt)).exp();
            let expect = if in_a { ratio - 1.0 } else { Complex64::new(0.0, 0.0) };
            ((x - expect).norm(), ratio.norm().powf(p))
        })
        .collect();
    let res: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mom: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(ResolventMcReport { lambda: (lambda.re, lambda.im), tau_index, steps: ens.grid.steps, residual: mean_se(&res), moment: mean_se(&mom), p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEquivalence {
    pub depth: usize,
    pub nilpotency_index: Option<usize>,
    pub r2: f64,
    pub b_infinite: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayPoint {
    /// λ = i·y
    pub y: f64,
    /// exponent of exp(θ⟨M⟩_T) = |E(iyM)_T|^p
    pub theta: f64,
    pub doubling: DoublingDiagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEquivalence {
    pub b_lo: f64,
    pub b_hi: Option<f64>,
    pub r_hat: f64,
    pub b_finite: bool,
    pub r_nonzero: bool,
    pub ray: Vec<RayPoint>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub tree: TreeEquivalence,
    pub mc: Option<McEquivalence>,
}

pub fn tree_equivalence(tree: &TreeFiltration, m: &TreeMartingale<f64>) -> Result<TreeEquivalence> {
    let opm = operator_matrix(tree, m);
    let nil = opm.nilpotency_index();
    let r2 = spectral_radius_tree(tree, &opm, 2.0, 1, 0)?.radius;
    let b_infinite = estimate_tree(ExponentName::B, 10.0).infinite;
    let holds = nil.map_or(false, |k| k <= tree.depth() + 1) && r2 == 0.0 && b_infinite;
    Ok(TreeEquivalence { depth: tree.depth(), nilpotency_index: nil, r2, b_infinite, holds })
}

/// Brownian motion stopped on leaving [−1, 1], run on its own clock up to `horizon`.
/// Its terminal bracket has the law of ⟨M⟩_T for the stopped time change, without
/// the cap that the grid below t = 1 puts on it.
pub fn exit_clock_ensemble(n_paths: usize, seed: u64, horizon: f64, steps_per_unit: usize) -> Result<PathEnsemble> {
    let spec = MartingaleSpec { integrand: Integrand::Constant { value: 1.0 }, scale: 1.0, stop: Some(BarrierRule::AbsAbove(1.0)), aux: vec![] };
    let steps = (horizon * steps_per_unit as f64).ceil() as usize;
    PathEnsemble::new(spec, TimeGrid::new(0.0, horizon, steps)?, n_paths, seed)
}

/// Terminal bracket of every path.
pub fn terminal_brackets(ens: &PathEnsemble) -> Vec<f64> {
    (0..ens.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut q = 0.0;
            ens.walk(i, &[Monitor::Every], |_, _, st| {
                q = ens.qv_of(&st[0]);
                st[0].stopped_at.is_none()
            });
            q
        })
        .collect()
}

/// The path side: finite b̂, r̂ away from 0, and the R_p constant of E(iyM)
/// finite at small y and flagged divergent at large y. `ray` supplies samples
/// of the terminal bracket ⟨M⟩_T.
pub fn mc_equivalence(ray: &PathEnsemble, b: &ExponentReport, r_hat: f64, p: f64, ys: &[f64], groups: usize, factor: f64) -> McEquivalence {
    let qt = terminal_brackets(ray);
    let ray: Vec<RayPoint> = ys
        .iter()
        .map(|&y| {
            let theta = 0.5 * p * y * y;
            RayPoint { y, theta, doubling: doubling_diagnostic(&qt, theta, groups, factor) }
        })
        .collect();
    let b_finite = !b.infinite;
    let r_nonzero = r_hat >= 0.3;
    let ray_ok = ray.first().map_or(true, |r| !r.doubling.infinite) && ray.last().map_or(true, |r| r.doubling.infinite);
    McEquivalence { b_lo: b.lo, b_hi: b.hi, r_hat, b_finite, r_nonzero, holds: b_finite && r_nonzero && ray_ok, ray }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{random_tree, Generator};

    #[test]
    fn depth_one_operator_vanishes() {
        let (t, m) = random_tree(3, 1, 3, Generator::Uniform).unwrap();
        let opm = operator_matrix(&t, &m);
        assert!(opm.matrix.iter().all(|&x| x == 0.0));
        assert_eq!(opm.nilpotency_index(), Some(1));
    }

    #[test]
    fn matrix_reproduces_integral() {
        let (t, m) = random_tree(4, 4, 3, Generator::Skewed).unwrap();
        let opm = operator_matrix(&t, &m);
        assert!(opm.audit(&t, &m, 10, 1) < 1e-12);
        assert!(opm.nilpotency_index().unwrap() <= t.depth() + 1);
    }

    #[test]
    fn resolvent_full_window_is_exact() {
        let (t, m) = random_tree(5, 4, 2, Generator::Uniform).unwrap();
        let tau = TreeStoppingTime::at_level(&t, 0);
        let sigma = TreeStoppingTime::at_level(&t, t.depth());
        let event = vec![true; t.n_nodes()];
        let r = resolvent_probe_tree(&t, &m, Complex64::new(0.3, 0.0), &tau, &sigma, &event, 2.0).unwrap();
        assert!(r.identity_gap < 1e-12, "{}", r.identity_gap);
    }
}
