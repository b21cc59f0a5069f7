//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use bmolab::tree::{TreeFiltration, TreeMartingale};

/// Every stopping time of the subtree at `v`, as the set of its stopping nodes.
pub fn cuts(tree: &TreeFiltration, v: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![v]];
    if tree.is_leaf(v) {
        return out;
    }
    let mut acc: Vec<Vec<usize>> = vec![vec![]];
    for c in tree.children(v) {
        let sub = cuts(tree, c);
        let mut next = Vec::with_capacity(acc.len() * sub.len());
        for a in &acc {
            for s in &sub {
                let mut x = a.clone();
                x.extend_from_slice(s);
                next.push(x);
            }
        }
        acc = next;
    }
    out.extend(acc);
    out
}

/// E[⟨M⟩_T − ⟨M⟩_v | v] from conditional second moments of the values, by a backward pass.
pub fn remaining_bracket(tree: &TreeFiltration, values: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; tree.n_nodes()];
    for v in tree.internal_nodes().rev() {
        let mut s = 0.0;
        for c in tree.children(v) {
            let d = values[c] - values[v];
            s += tree.prob(c) * (d * d + r[c]);
        }
        r[v] = s;
    }
    r
}

/// BMO norm by enumerating every stopping time from the root.
pub fn brute_bmo(tree: &TreeFiltration, m: &TreeMartingale<f64>) -> f64 {
    let r = remaining_bracket(tree, m.values());
    cuts(tree, 0).iter().map(|cut| cut.iter().map(|&s| r[s]).fold(0.0, f64::max)).fold(0.0, f64::max).sqrt()
}

/// sup over stopping times of ess sup E[(L_T/L_τ)^p | F_τ], by enumeration.
pub fn brute_reverse_holder(tree: &TreeFiltration, l: &[f64], p: f64) -> f64 {
    // E[L_T^p | v] by a backward pass
    let mut e = vec![0.0; tree.n_nodes()];
    for v in tree.leaves() {
        e[v] = l[v].powf(p);
    }
    for v in tree.internal_nodes().rev() {
        e[v] = tree.children(v).map(|c| tree.prob(c) * e[c]).sum();
    }
    cuts(tree, 0).iter().map(|cut| cut.iter().map(|&s| e[s] / l[s].powf(p)).fold(0.0, f64::max)).fold(0.0, f64::max)
}

/// max over internal nodes of |E[ΔX·ΔY | v]|.
pub fn max_conditional_covariation(tree: &TreeFiltration, x: &[f64], y: &[f64]) -> f64 {
    tree.internal_nodes()
        .map(|v| tree.children(v).map(|c| tree.prob(c) * (x[c] - x[v]) * (y[c] - y[v])).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// E[exp(λτ)] = sec(√(2λ)) for the exit time τ of [−1, 1] by Brownian motion from 0.
pub fn sec(x: f64) -> f64 {
    1.0 / x.cos()
}
