//! Exact tree norms (R^p, H^p, BMO), reverse Hölder constants and ε-slicing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{finite_or_null, Backend};
use crate::scalar::Scalar;
use crate::tree::{sup_over_stopping_times, TreeFiltration, TreeMartingale, TreeProcess, TreeStoppingTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormName {
    #[serde(rename = "R^p")]
    Rp,
    #[serde(rename = "H^p")]
    Hp,
    #[serde(rename = "BMO")]
    Bmo,
    #[serde(rename = "L^p")]
    Lp,
    #[serde(rename = "reverse-holder")]
    ReverseHolder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub name: NormName,
    /// `None` stands for p = ∞ or "not applicable" (BMO).
    #[serde(serialize_with = "finite_or_null")]
    pub p: Option<f64>,
    pub value: f64,
    pub backend: Backend,
    /// Standard error on the Monte Carlo backend.
    pub error: Option<f64>,
}

impl NormReport {
    pub fn tree(name: NormName, p: Option<f64>, value: f64) -> Self {
        NormReport { name, p, value, backend: Backend::Tree, error: None }
    }
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if p >= 1.0 && !p.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidExponent(p))
    }
}

/// ‖Y‖_{R^p} = ‖max_k |Y_k|‖_{L^p}; `p = ∞` gives the sup over all nodes.
pub fn norm_rp<S: Scalar>(tree: &TreeFiltration, x: &[S], p: f64) -> Result<NormReport> {
    check_p(p)?;
    let proc = TreeProcess::adapted(x.to_vec());
    let run = proc.running_max_abs(tree);
    let value = if p.is_infinite() {
        run[tree.leaves()].iter().copied().fold(0.0, f64::max)
    } else {
        tree.expect_leaves(|l| run[l].powf(p)).powf(1.0 / p)
    };
    Ok(NormReport::tree(NormName::Rp, if p.is_infinite() { None } else { Some(p) }, value))
}

/// ‖M‖_{H^p} = ‖⟨M⟩_T^{1/2}‖_{L^p}.
pub fn norm_hp<S: Scalar>(tree: &TreeFiltration, m: &TreeMartingale<S>, p: f64) -> Result<NormReport> {
    check_p(p)?;
    let b = m.bracket();
    let value = if p.is_infinite() {
        tree.leaves().map(|l| b[l].sqrt()).fold(0.0, f64::max)
    } else {
        tree.expect_leaves(|l| b[l].powf(p / 2.0)).powf(1.0 / p)
    };
    Ok(NormReport::tree(NormName::Hp, if p.is_infinite() { None } else { Some(p) }, value))
}

/// ‖ξ‖_{L^p} of a terminal variable given per leaf.
pub fn norm_lp(tree: &TreeFiltration, leaf_abs: impl Fn(usize) -> f64, p: f64) -> Result<NormReport> {
    check_p(p)?;
    let value = if p.is_infinite() {
        tree.leaves().map(&leaf_abs).fold(0.0, f64::max)
    } else {
        tree.expect_leaves(|l| leaf_abs(l).powf(p)).powf(1.0 / p)
    };
    Ok(NormReport::tree(NormName::Lp, if p.is_infinite() { None } else { Some(p) }, value))
}

/// sqrt of max over nodes of E[⟨M⟩_T − ⟨M⟩_v | v].
pub fn bmo_norm<S: Scalar>(tree: &TreeFiltration, m: &TreeMartingale<S>) -> NormReport {
    let g = m.remaining_bracket_generic(tree);
    NormReport::tree(NormName::Bmo, None, sup_over_stopping_times(&g).max(0.0).sqrt())
}

/// BMO norm of a vector martingale given by components (Euclidean bracket).
pub fn bmo_norm_vector(tree: &TreeFiltration, comps: &[TreeMartingale<f64>]) -> f64 {
    let mut g = vec![0.0; tree.n_nodes()];
    for m in comps {
        for (a, b) in g.iter_mut().zip(m.remaining_bracket(tree)) {
            *a += b;
        }
    }
    sup_over_stopping_times(&g).max(0.0).sqrt()
}

/// sup over nodes of E[|L_T / L_v|^p | v] for a strictly positive process.
pub fn reverse_holder_constant(tree: &TreeFiltration, l: &[f64], p: f64) -> Result<NormReport> {
    check_p(p)?;
    if l.len() != tree.n_nodes() {
        return Err(Error::Dimension { expected: tree.n_nodes(), got: l.len() });
    }
    if let Some((i, &v)) = l.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::NonPositive { index: i, value: v });
    }
    let leaf_pow: Vec<f64> = tree.leaves().map(|x| l[x].powf(p)).collect();
    let e = tree.expect_from_leaves(&leaf_pow);
    let g: Vec<f64> = (0..tree.n_nodes()).map(|v| e[v] / l[v].powf(p)).collect();
    Ok(NormReport::tree(NormName::ReverseHolder, Some(p), sup_over_stopping_times(&g)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceCertificate {
    pub eps: f64,
    /// T₀ = 0 ≤ T₁ ≤ … ≤ T_k = T.
    pub boundaries: Vec<TreeStoppingTime>,
    /// BMO norm of M^{T_{i+1}} − M^{T_i}, recomputed independently of the construction.
    pub slice_bmo: Vec<f64>,
    /// Slice index governing the transition out of each node.
    pub slice_of: Vec<usize>,
}

impl SliceCertificate {
    pub fn count(&self) -> usize {
        self.slice_bmo.len()
    }

    /// Every slice norm ≤ ε + tol.
    pub fn validates(&self, tol: f64) -> bool {
        self.slice_bmo.iter().all(|&b| b <= self.eps + tol)
    }
}

/// Smallest ε for which greedy slicing is possible: sqrt of the largest one-step bracket.
pub fn min_feasible_eps(tree: &TreeFiltration, m: &TreeMartingale<f64>) -> f64 {
    tree.internal_nodes().map(|v| m.step_bracket(tree, v)).fold(0.0, f64::max).sqrt()
}

/// Greedy pathwise slicing of several martingales at once: a new slice starts at
/// a node as soon as one of them would push its accumulated bracket past ε².
/// Returns the slice index of every node.
pub fn greedy_slices(tree: &TreeFiltration, targets: &[(&TreeMartingale<f64>, f64)]) -> Result<Vec<usize>> {
    for &(m, eps) in targets {
        for v in tree.internal_nodes() {
            let step = m.step_bracket(tree, v);
            if step > eps * eps * (1.0 + 1e-12) {
                return Err(Error::SliceImpossible { eps, node: v, step, min_eps: min_feasible_eps(tree, m) });
            }
        }
    }
    let k = targets.len();
    let n = tree.n_nodes();
    let mut slice_of = vec![0usize; n];
    // bracket accumulated since the current slice started, per target
    let mut acc = vec![0.0; n * k];
    for v in tree.internal_nodes() {
        let mut restart = false;
        for (j, &(m, eps)) in targets.iter().enumerate() {
            if acc[v * k + j] + m.step_bracket(tree, v) > eps * eps * (1.0 + 1e-12) {
                restart = true;
            }
        }
        if restart {
            slice_of[v] += 1;
            for j in 0..k {
                acc[v * k + j] = 0.0;
            }
        }
        for c in tree.children(v) {
            slice_of[c] = slice_of[v];
            for (j, &(m, _)) in targets.iter().enumerate() {
                acc[c * k + j] = acc[v * k + j] + m.step_bracket(tree, v);
            }
        }
    }
    Ok(slice_of)
}

/// Boundary stopping times from per-node slice indices.
pub fn boundaries_from_slices(tree: &TreeFiltration, slice_of: &[usize]) -> Vec<TreeStoppingTime> {
    let count = tree.leaves().map(|l| slice_of[l]).max().unwrap_or(0) + 1;
    (0..=count)
        .map(|i| {
            let flags = (0..tree.n_nodes()).map(|v| tree.is_leaf(v) || (i < count && slice_of[v] >= i)).collect();
            TreeStoppingTime::new(tree, flags).expect("leaves are flagged")
        })
        .collect()
}

/// The slice martingale M^{T_{i+1}} − M^{T_i}: increments of M on transitions governed by slice i.
pub fn slice_part(tree: &TreeFiltration, m: &TreeMartingale<f64>, slice_of: &[usize], i: usize) -> TreeMartingale<f64> {
    let mut values = vec![0.0; tree.n_nodes()];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            let d = if slice_of[v] == i { m.increment(tree, c) } else { 0.0 };
            values[c] = values[v] + d;
        }
    }
    TreeMartingale::new(tree, values).expect("increments of a martingale")
}

pub fn epsilon_slice(tree: &TreeFiltration, m: &TreeMartingale<f64>, eps: f64) -> Result<SliceCertificate> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let slice_of = greedy_slices(tree, &[(m, eps)])?;
    Ok(certify(tree, m, eps, slice_of))
}

pub(crate) fn certify(tree: &TreeFiltration, m: &TreeMartingale<f64>, eps: f64, slice_of: Vec<usize>) -> SliceCertificate {
    let boundaries = boundaries_from_slices(tree, &slice_of);
    let count = boundaries.len() - 1;
    let slice_bmo = (0..count).map(|i| bmo_norm(tree, &slice_part(tree, m, &slice_of, i)).value).collect();
    SliceCertificate { eps, boundaries, slice_bmo, slice_of }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeMartingale;

    fn coin() -> (TreeFiltration, TreeMartingale<f64>) {
        let t = TreeFiltration::uniform(1, 2).unwrap();
        let m = TreeMartingale::new(&t, vec![0.0, 1.0, -1.0]).unwrap();
        (t, m)
    }

    #[test]
    fn coin_norms() {
        let (t, m) = coin();
        assert_eq!(bmo_norm(&t, &m).value, 1.0);
        for p in [1.0, 2.0, 3.5] {
            assert!((norm_hp(&t, &m, p).unwrap().value - 1.0).abs() < 1e-15);
        }
        assert_eq!(bmo_norm(&t, &TreeMartingale::<f64>::zero(&t)).value, 0.0);
        assert!(norm_rp(&t, m.values(), 0.5).is_err());
    }

    #[test]
    fn constant_rp() {
        let t = TreeFiltration::uniform(3, 2).unwrap();
        let x = vec![-2.5; t.n_nodes()];
        for p in [1.0, 2.0, f64::INFINITY] {
            assert!((norm_rp(&t, &x, p).unwrap().value - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn reverse_holder_of_constant_is_one() {
        let t = TreeFiltration::uniform(3, 3).unwrap();
        let l = vec![2.0; t.n_nodes()];
        assert_eq!(reverse_holder_constant(&t, &l, 3.0).unwrap().value, 1.0);
        let mut bad = l.clone();
        bad[4] = 0.0;
        assert!(matches!(reverse_holder_constant(&t, &bad, 2.0), Err(Error::NonPositive { index: 4, .. })));
    }

    #[test]
    fn deterministic_bracket_slice_count() {
        // ±√δ coin at every node: Δ⟨M⟩ = δ per step
        let t = TreeFiltration::uniform(6, 2).unwrap();
        let d: f64 = 0.25;
        let raw: Vec<f64> = (0..t.n_nodes()).map(|c| if c % 2 == 1 { d.sqrt() } else { -d.sqrt() }).collect();
        let m = TreeMartingale::from_raw_increments(&t, 0.0, &raw).unwrap();
        for (eps, expect) in [(0.5, 6), (1.0, 2), (0.75f64.sqrt(), 2), (10.0, 1)] {
            let cert = epsilon_slice(&t, &m, eps).unwrap();
            assert_eq!(cert.count(), expect, "eps {eps}");
            assert!(cert.validates(1e-12));
        }
        let err = epsilon_slice(&t, &m, 0.4).unwrap_err();
        match err {
            Error::SliceImpossible { min_eps, .. } => assert!((min_eps - 0.5).abs() < 1e-15),
            e => panic!("{e}"),
        }
    }
}
