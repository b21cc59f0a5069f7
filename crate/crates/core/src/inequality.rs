//! Exact verifiers for the bracket inequalities on trees.
//!
//! Each verifier returns an [`InequalityReport`]; `pass` is `lhs ≤ rhs·(1+tol)`.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bmo::{bmo_norm, check_p, norm_hp, norm_rp};
use crate::corpus::{random_adapted, random_martingale, rng, CorpusMember, CorpusSpec};
use crate::error::{Error, Result};
use crate::report::Backend;
use crate::tree::{covariation, stochastic_integral, step_covariation, TreeFiltration, TreeMartingale, TreeProcess};

pub const TREE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub pass: bool,
    pub tol: f64,
    pub corpus_id: Option<usize>,
    pub backend: Backend,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl InequalityReport {
    pub fn new(name: &str, lhs: f64, rhs: f64, tol: f64) -> Self {
        let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
        InequalityReport {
            name: name.into(),
            lhs,
            rhs,
            ratio,
            pass: lhs <= rhs * (1.0 + tol),
            tol,
            corpus_id: None,
            backend: Backend::Tree,
            metadata: BTreeMap::new(),
        }
    }

    pub fn meta(mut self, key: &str, v: impl Serialize) -> Self {
        self.metadata.insert(key.into(), serde_json::to_value(v).unwrap_or(serde_json::Value::Null));
        self
    }

    fn also(mut self, ok: bool) -> Self {
        self.pass &= ok;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inequality {
    KunitaWatanabe,
    Fefferman,
    Emery,
    LpBracket,
    LinftyBracket,
    RinfBmo,
    Duality,
}

impl Inequality {
    pub const ALL: [Inequality; 7] = [
        Inequality::KunitaWatanabe,
        Inequality::Fefferman,
        Inequality::Emery,
        Inequality::LpBracket,
        Inequality::LinftyBracket,
        Inequality::RinfBmo,
        Inequality::Duality,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Inequality::KunitaWatanabe => "kunita-watanabe",
            Inequality::Fefferman => "fefferman",
            Inequality::Emery => "emery",
            Inequality::LpBracket => "lp-bracket",
            Inequality::LinftyBracket => "linfty-bracket",
            Inequality::RinfBmo => "rinf-bmo",
            Inequality::Duality => "duality",
        }
    }
}

impl std::str::FromStr for Inequality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Inequality::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown inequality '{s}' (known: {})", Inequality::ALL.map(|i| i.as_str()).join(", "))))
    }
}

fn conjugate(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else {
        p / (p - 1.0)
    }
}

fn lp_of(tree: &TreeFiltration, leaf: &[f64], p: f64) -> f64 {
    let off = tree.leaves().start;
    if p.is_infinite() {
        leaf.iter().map(|x| x.abs()).fold(0.0, f64::max)
    } else {
        tree.expect_leaves(|l| leaf[l - off].abs().powf(p)).powf(1.0 / p)
    }
}

/// Pathwise Σ|H||K||ΔXΔY| ≤ (ΣH²ΔX²)^{1/2}(ΣK²ΔY²)^{1/2} on every path, and its
/// expectation against the Hölder product ‖·‖_p‖·‖_q. H and K enter at the start of each step.
pub fn verify_kunita_watanabe(
    tree: &TreeFiltration,
    x: &TreeMartingale<f64>,
    y: &TreeMartingale<f64>,
    h: &TreeProcess<f64>,
    k: &TreeProcess<f64>,
    p: f64,
    tol: f64,
) -> Result<InequalityReport> {
    check_p(p)?;
    if p.is_infinite() {
        return Err(Error::InvalidExponent(p));
    }
    let n = tree.n_nodes();
    let (mut tv, mut a, mut b) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            let (dx, dy) = (x.increment(tree, c), y.increment(tree, c));
            tv[c] = tv[v] + (h.values[v] * k.values[v] * dx * dy).abs();
            a[c] = a[v] + h.values[v] * h.values[v] * dx * dx;
            b[c] = b[v] + k.values[v] * k.values[v] * dy * dy;
        }
    }
    let leaves = tree.leaves();
    let mut worst: f64 = 0.0;
    let mut path_ok = true;
    for l in leaves.clone() {
        let r = (a[l] * b[l]).sqrt();
        path_ok &= tv[l] <= r * (1.0 + tol);
        if tv[l] > 0.0 {
            worst = worst.max(tv[l] / r);
        }
    }
    let lhs = tree.expect_leaves(|l| tv[l]);
    let sa: Vec<f64> = leaves.clone().map(|l| a[l].sqrt()).collect();
    let sb: Vec<f64> = leaves.map(|l| b[l].sqrt()).collect();
    let rhs = lp_of(tree, &sa, p) * lp_of(tree, &sb, conjugate(p));
    Ok(InequalityReport::new(Inequality::KunitaWatanabe.as_str(), lhs, rhs, tol)
        .also(path_ok)
        .meta("p", p)
        .meta("worst_path_ratio", worst)
        .meta("pathwise_pass", path_ok))
}

/// Σ_v P(v)|E[ΔXΔY | v]| ≤ √2‖X‖_{H¹}‖Y‖_BMO.
pub fn verify_fefferman(tree: &TreeFiltration, x: &TreeMartingale<f64>, y: &TreeMartingale<f64>, tol: f64) -> Result<InequalityReport> {
    let s = step_covariation(tree, x, y);
    let lhs: f64 = tree.internal_nodes().map(|v| tree.abs_prob(v) * s[v].abs()).sum();
    let rhs = SQRT_2 * norm_hp(tree, x, 1.0)?.value * bmo_norm(tree, y).value;
    Ok(InequalityReport::new(Inequality::Fefferman.as_str(), lhs, rhs, tol))
}

/// ‖X∘M‖_{H^p} ≤ c‖X‖_{R^p}‖M‖_BMO with c = √2 for p > 1 and c = 1 for p = 1.
pub fn verify_emery(tree: &TreeFiltration, x: &TreeProcess<f64>, m: &TreeMartingale<f64>, p: f64, tol: f64) -> Result<InequalityReport> {
    check_p(p)?;
    let xm = stochastic_integral(tree, x, m)?;
    let c = if p == 1.0 { 1.0 } else { SQRT_2 };
    let lhs = norm_hp(tree, &xm, p)?.value;
    let rhs = c * norm_rp(tree, &x.values, p)?.value * bmo_norm(tree, m).value;
    Ok(InequalityReport::new(Inequality::Emery.as_str(), lhs, rhs, tol).meta("p", p).meta("constant", c))
}

/// Total variation of ⟨X,M⟩ per path.
fn bracket_variation(tree: &TreeFiltration, x: &TreeMartingale<f64>, m: &TreeMartingale<f64>) -> Vec<f64> {
    let s = step_covariation(tree, x, m);
    let mut tv = vec![0.0; tree.n_nodes()];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            tv[c] = tv[v] + s[v].abs();
        }
    }
    tv
}

/// ‖∫|d⟨X,M⟩|‖_{L^p} ≤ √2·p·‖X‖_{H^p}‖M‖_BMO.
pub fn verify_lp_bracket(tree: &TreeFiltration, x: &TreeMartingale<f64>, m: &TreeMartingale<f64>, p: f64, tol: f64) -> Result<InequalityReport> {
    check_p(p)?;
    let tv = bracket_variation(tree, x, m);
    let leaf: Vec<f64> = tree.leaves().map(|l| tv[l]).collect();
    let lhs = lp_of(tree, &leaf, p);
    let rhs = SQRT_2 * p * norm_hp(tree, x, p)?.value * bmo_norm(tree, m).value;
    Ok(InequalityReport::new(Inequality::LpBracket.as_str(), lhs, rhs, tol).meta("p", p))
}

/// BMO norm of t ↦ E[⟨X,M⟩_T | F_t] against √2‖X‖_BMO‖M‖_BMO.
pub fn verify_linfty_bracket(tree: &TreeFiltration, x: &TreeMartingale<f64>, m: &TreeMartingale<f64>, tol: f64) -> Result<InequalityReport> {
    let cov = covariation(tree, x, m);
    let leaf: Vec<f64> = tree.leaves().map(|l| cov.values[l]).collect();
    let n = TreeMartingale::unchecked(tree, tree.expect_from_leaves(&leaf));
    let lhs = bmo_norm(tree, &n).value;
    let rhs = SQRT_2 * bmo_norm(tree, x).value * bmo_norm(tree, m).value;
    Ok(InequalityReport::new(Inequality::LinftyBracket.as_str(), lhs, rhs, tol))
}

/// ‖X∘M‖_BMO ≤ ‖X‖_{R^∞}‖M‖_BMO.
pub fn verify_rinf_bmo(tree: &TreeFiltration, x: &TreeProcess<f64>, m: &TreeMartingale<f64>, tol: f64) -> Result<InequalityReport> {
    let xm = stochastic_integral(tree, x, m)?;
    let lhs = bmo_norm(tree, &xm).value;
    let rhs = norm_rp(tree, &x.values, f64::INFINITY)?.value * bmo_norm(tree, m).value;
    Ok(InequalityReport::new(Inequality::RinfBmo.as_str(), lhs, rhs, tol))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdgEstimate {
    pub p: f64,
    /// Smallest observed ‖M − M₀‖_{R^p}/‖M‖_{H^p}.
    pub c_hat: f64,
    /// Largest observed ratio.
    pub big_c_hat: f64,
    pub members: usize,
}

pub fn bdg_ratio(tree: &TreeFiltration, m: &TreeMartingale<f64>, p: f64) -> Result<Option<f64>> {
    let h = norm_hp(tree, m, p)?.value;
    if !(h > 0.0) {
        return Ok(None);
    }
    let r = norm_rp(tree, m.centered(tree).values(), p)?.value;
    Ok(Some(r / h))
}

pub fn estimate_bdg_constants(p: f64, corpus: &[(TreeFiltration, TreeMartingale<f64>)]) -> Result<BdgEstimate> {
    check_p(p)?;
    let ratios: Vec<f64> = corpus.par_iter().map(|(t, m)| bdg_ratio(t, m, p)).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if ratios.is_empty() {
        return Err(Error::Empty("BDG estimate needs a corpus with at least one nonzero martingale".into()));
    }
    Ok(BdgEstimate {
        p,
        c_hat: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        big_c_hat: ratios.iter().copied().fold(0.0, f64::max),
        members: ratios.len(),
    })
}

/// max over BMO-normalized probes of E[⟨X,Y⟩_T], against √2‖X‖_{H¹}. The
/// fraction of ‖X‖_{H¹} reached is recorded in the metadata.
pub fn duality_lower_bound(tree: &TreeFiltration, x: &TreeMartingale<f64>, probes: &[TreeMartingale<f64>], tol: f64) -> Result<InequalityReport> {
    let h1 = norm_hp(tree, x, 1.0)?.value;
    let mut best: f64 = 0.0;
    let mut best_probe = None;
    for (i, y) in probes.iter().enumerate() {
        let b = bmo_norm(tree, y).value;
        if !(b > 0.0) {
            continue;
        }
        let cov = covariation(tree, x, y);
        let e = tree.expect_leaves(|l| cov.values[l]) / b;
        if e > best {
            best = e;
            best_probe = Some(i);
        }
    }
    let fraction = if h1 > 0.0 { best / h1 } else { 0.0 };
    Ok(InequalityReport::new(Inequality::Duality.as_str(), best, SQRT_2 * h1, tol)
        .meta("h1", h1)
        .meta("fraction", fraction)
        .meta("best_probe", best_probe)
        .meta("probes", probes.len()))
}

/// Runs one inequality on a corpus member with inputs derived from the member seed.
pub fn verify_member(ineq: Inequality, member: &CorpusMember, p: f64, tol: f64) -> Result<InequalityReport> {
    let t = &member.tree;
    let m = &member.martingale;
    let mut r = rng(member.seed ^ 0xA5A5_A5A5);
    let rep = match ineq {
        Inequality::KunitaWatanabe => {
            let y = random_martingale(t, &mut r);
            let h = random_adapted(t, &mut r, 1.0);
            let k = random_adapted(t, &mut r, 1.0);
            verify_kunita_watanabe(t, m, &y, &h, &k, p, tol)?
        }
        Inequality::Fefferman => verify_fefferman(t, m, &random_martingale(t, &mut r), tol)?,
        Inequality::Emery => verify_emery(t, &random_adapted(t, &mut r, 1.0), m, p, tol)?,
        Inequality::LpBracket => verify_lp_bracket(t, &random_martingale(t, &mut r), m, p, tol)?,
        Inequality::LinftyBracket => verify_linfty_bracket(t, &random_martingale(t, &mut r), m, tol)?,
        Inequality::RinfBmo => verify_rinf_bmo(t, &random_adapted(t, &mut r, 1.0), m, tol)?,
        Inequality::Duality => {
            let mut probes = vec![m.clone()];
            probes.extend((0..63).map(|_| random_martingale(t, &mut r)));
            duality_lower_bound(t, m, &probes, tol)?
        }
    };
    Ok(InequalityReport { corpus_id: Some(member.id), ..rep })
}

pub fn verify_corpus(ineq: Inequality, corpus: &CorpusSpec, p: f64, tol: f64) -> Result<Vec<InequalityReport>> {
    (0..corpus.n).into_par_iter().map(|i| verify_member(ineq, &corpus.member(i)?, p, tol)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coin() -> (TreeFiltration, TreeMartingale<f64>) {
        let t = TreeFiltration::uniform(1, 2).unwrap();
        let m = TreeMartingale::new(&t, vec![0.0, -1.0, 1.0]).unwrap();
        (t, m)
    }

    #[test]
    fn coin_hand_values() {
        let (t, m) = coin();
        let f = verify_fefferman(&t, &m, &m, TREE_TOL).unwrap();
        assert!((f.lhs - 1.0).abs() < 1e-15 && (f.rhs - SQRT_2).abs() < 1e-15 && f.pass);
        let l = verify_lp_bracket(&t, &m, &m, 2.0, TREE_TOL).unwrap();
        assert!((l.lhs - 1.0).abs() < 1e-15 && (l.rhs - 2.0 * SQRT_2).abs() < 1e-14);
        let li = verify_linfty_bracket(&t, &m, &m, TREE_TOL).unwrap();
        assert_eq!(li.lhs, 0.0);
        assert!((li.rhs - SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn zero_inputs_give_zero_ratio() {
        let (t, m) = coin();
        let z = TreeMartingale::zero(&t);
        let r = verify_fefferman(&t, &m, &z, TREE_TOL).unwrap();
        assert!(r.pass && r.lhs == 0.0 && r.rhs == 0.0 && r.ratio == 0.0);
        let zero = TreeProcess::constant(&t, 0.0, crate::tree::ProcessKind::Predictable);
        assert!(verify_emery(&t, &zero, &m, 2.0, TREE_TOL).unwrap().pass);
        assert!(verify_rinf_bmo(&t, &zero, &m, TREE_TOL).unwrap().pass);
    }

    #[test]
    fn names_round_trip() {
        for i in Inequality::ALL {
            assert_eq!(i.as_str().parse::<Inequality>().unwrap(), i);
        }
        assert!("nope".parse::<Inequality>().is_err());
    }
}
