//! Finite filtrations as uniform B-ary trees.
//!
//! Nodes are numbered level by level: level `k` holds `B^k` nodes and the
//! `j`-th child of the node at position `i` sits at position `i*B + j` of the
//! next level. Everything attached to an edge (transition probability,
//! martingale increment) is stored on the child node.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PROB_TOL: f64 = 1e-14;
pub const MARTINGALE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeFiltration {
    depth: usize,
    branching: usize,
    starts: Vec<usize>,
    level: Vec<usize>,
    prob: Vec<f64>,
    abs_prob: Vec<f64>,
    time_step: f64,
}

impl TreeFiltration {
    /// `child_probs` lists the transition probability of every non-root node,
    /// in node order.
    pub fn new(depth: usize, branching: usize, child_probs: &[f64], time_step: Option<f64>) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidTree("depth must be at least 1".into()));
        }
        if branching < 2 {
            return Err(Error::InvalidTree("branching must be at least 2".into()));
        }
        let mut starts = vec![0usize];
        let mut width = 1usize;
        for _ in 0..=depth {
            let next = starts.last().unwrap() + width;
            starts.push(next);
            width = width
                .checked_mul(branching)
                .ok_or_else(|| Error::InvalidTree("tree too large".into()))?;
        }
        let n = starts[depth + 1];
        if child_probs.len() != n - 1 {
            return Err(Error::Dimension { expected: n - 1, got: child_probs.len() });
        }
        let mut prob = Vec::with_capacity(n);
        prob.push(1.0);
        prob.extend_from_slice(child_probs);
        let mut level = vec![0usize; n];
        for k in 0..=depth {
            for v in starts[k]..starts[k + 1] {
                level[v] = k;
            }
        }
        let dt = time_step.unwrap_or(1.0 / depth as f64);
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidTree(format!("time step {dt} must be positive")));
        }
        let mut tree = TreeFiltration { depth, branching, starts, level, prob, abs_prob: Vec::new(), time_step: dt };
        for v in tree.internal_nodes() {
            let mut total = 0.0;
            for c in tree.children(v) {
                let p = tree.prob[c];
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::InvalidTree(format!("transition probability {p} into node {c} is not positive")));
                }
                total += p;
            }
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidTree(format!("probabilities at node {v} sum to {total}")));
            }
        }
        let mut abs_prob = vec![1.0; n];
        for c in 1..n {
            abs_prob[c] = abs_prob[tree.parent(c).unwrap()] * tree.prob[c];
        }
        tree.abs_prob = abs_prob;
        Ok(tree)
    }

    /// Equal transition probabilities 1/B everywhere.
    pub fn uniform(depth: usize, branching: usize) -> Result<Self> {
        let n = Self::node_count(depth, branching);
        let p = 1.0 / branching as f64;
        Self::new(depth, branching, &vec![p; n.saturating_sub(1)], None)
    }

    pub fn node_count(depth: usize, branching: usize) -> usize {
        let mut n = 0;
        let mut w = 1;
        for _ in 0..=depth {
            n += w;
            w *= branching;
        }
        n
    }

    pub fn with_time_step(mut self, dt: f64) -> Self {
        assert!(dt > 0.0);
        self.time_step = dt;
        self
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn branching(&self) -> usize {
        self.branching
    }
    pub fn time_step(&self) -> f64 {
        self.time_step
    }
    pub fn n_nodes(&self) -> usize {
        self.starts[self.depth + 1]
    }
    pub fn level_range(&self, k: usize) -> Range<usize> {
        self.starts[k]..self.starts[k + 1]
    }
    /// Nodes with children, i.e. every level below the horizon.
    pub fn internal_nodes(&self) -> Range<usize> {
        0..self.starts[self.depth]
    }
    pub fn leaves(&self) -> Range<usize> {
        self.level_range(self.depth)
    }
    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }
    pub fn level(&self, v: usize) -> usize {
        self.level[v]
    }
    pub fn is_leaf(&self, v: usize) -> bool {
        self.level[v] == self.depth
    }
    pub fn parent(&self, v: usize) -> Option<usize> {
        if v == 0 {
            return None;
        }
        let k = self.level[v];
        let pos = v - self.starts[k];
        Some(self.starts[k - 1] + pos / self.branching)
    }
    pub fn children(&self, v: usize) -> Range<usize> {
        let k = self.level[v];
        if k == self.depth {
            return 0..0;
        }
        let first = self.starts[k + 1] + (v - self.starts[k]) * self.branching;
        first..first + self.branching
    }
    /// Transition probability from the parent into `v` (1 at the root).
    pub fn prob(&self, v: usize) -> f64 {
        self.prob[v]
    }
    /// Unconditional probability of reaching `v`.
    pub fn abs_prob(&self, v: usize) -> f64 {
        self.abs_prob[v]
    }
    pub fn transition_probs(&self) -> &[f64] {
        &self.prob[1..]
    }
    /// Root-to-`v` node list, both ends included.
    pub fn path(&self, v: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.level[v] + 1);
        let mut cur = Some(v);
        while let Some(u) = cur {
            out.push(u);
            cur = self.parent(u);
        }
        out.reverse();
        out
    }
    /// Ancestor of `v` at level `k` (k ≤ level(v)).
    pub fn ancestor(&self, mut v: usize, k: usize) -> usize {
        while self.level[v] > k {
            v = self.parent(v).unwrap();
        }
        v
    }

    /// Backward conditional expectation of leaf values: E[x | node] for every node.
    pub fn expect_from_leaves<S: Scalar>(&self, leaf_values: &[S]) -> Vec<S> {
        let n = self.n_nodes();
        let mut out = vec![S::zero(); n];
        out[self.leaves()].copy_from_slice(leaf_values);
        for v in self.internal_nodes().rev() {
            let mut acc = S::zero();
            for c in self.children(v) {
                acc += S::from_f64(self.prob[c]) * out[c];
            }
            out[v] = acc;
        }
        out
    }

    /// Σ_c p(c) f(c) over the children of `v`.
    #[inline]
    pub fn child_mean<S: Scalar>(&self, v: usize, mut f: impl FnMut(usize) -> S) -> S {
        let mut acc = S::zero();
        for c in self.children(v) {
            acc += S::from_f64(self.prob[c]) * f(c);
        }
        acc
    }

    /// E[f(leaf)] under the tree measure.
    pub fn expect_leaves(&self, mut f: impl FnMut(usize) -> f64) -> f64 {
        self.leaves().map(|l| self.abs_prob[l] * f(l)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Adapted,
    /// Value at a node is used on every transition out of that node.
    Predictable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeProcess<S> {
    pub values: Vec<S>,
    pub kind: ProcessKind,
}

impl<S: Scalar> TreeProcess<S> {
    pub fn adapted(values: Vec<S>) -> Self {
        TreeProcess { values, kind: ProcessKind::Adapted }
    }
    pub fn predictable(values: Vec<S>) -> Self {
        TreeProcess { values, kind: ProcessKind::Predictable }
    }
    pub fn constant(tree: &TreeFiltration, c: S, kind: ProcessKind) -> Self {
        TreeProcess { values: vec![c; tree.n_nodes()], kind }
    }
    pub fn from_fn(tree: &TreeFiltration, kind: ProcessKind, f: impl FnMut(usize) -> S) -> Self {
        TreeProcess { values: (0..tree.n_nodes()).map(f).collect(), kind }
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        TreeProcess { values: self.values.iter().map(|&x| f(x)).collect(), kind: self.kind }
    }
    /// Running maximum of |x| along the path, per node.
    pub fn running_max_abs(&self, tree: &TreeFiltration) -> Vec<f64> {
        let mut out = vec![0.0f64; tree.n_nodes()];
        for v in 0..tree.n_nodes() {
            let here = self.values[v].modulus();
            out[v] = match tree.parent(v) {
                Some(u) => out[u].max(here),
                None => here,
            };
        }
        out
    }
}

/// A martingale on the tree with its predictable bracket ⟨M⟩ (cumulated
/// conditional second moments) and optional bracket [M] (cumulated squared
/// increments). Brackets use |ΔM|², so they stay real for complex entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMartingale<S> {
    values: Vec<S>,
    pbracket: Vec<f64>,
    obracket: Vec<f64>,
}

impl<S: Scalar> TreeMartingale<S> {
    pub fn new(tree: &TreeFiltration, values: Vec<S>) -> Result<Self> {
        if values.len() != tree.n_nodes() {
            return Err(Error::Dimension { expected: tree.n_nodes(), got: values.len() });
        }
        for v in tree.internal_nodes() {
            let mean = tree.child_mean(v, |c| values[c]);
            let scale = tree.children(v).map(|c| values[c].modulus()).fold(1.0, f64::max);
            let drift = (mean - values[v]).modulus();
            if !(drift <= MARTINGALE_TOL * scale) {
                return Err(Error::NotMartingale { node: v, drift });
            }
        }
        Ok(Self::unchecked(tree, values))
    }

    /// Builds from an initial value and per-edge increments (index = child node),
    /// removing the conditional mean of the increments at each node.
    pub fn from_raw_increments(tree: &TreeFiltration, initial: S, raw: &[S]) -> Result<Self> {
        if raw.len() != tree.n_nodes() {
            return Err(Error::Dimension { expected: tree.n_nodes(), got: raw.len() });
        }
        let mut values = vec![S::zero(); tree.n_nodes()];
        values[0] = initial;
        for v in tree.internal_nodes() {
            let mean = tree.child_mean(v, |c| raw[c]);
            for c in tree.children(v) {
                values[c] = values[v] + raw[c] - mean;
            }
        }
        Ok(Self::unchecked(tree, values))
    }

    pub fn zero(tree: &TreeFiltration) -> Self {
        Self::unchecked(tree, vec![S::zero(); tree.n_nodes()])
    }

    pub(crate) fn unchecked(tree: &TreeFiltration, values: Vec<S>) -> Self {
        let n = tree.n_nodes();
        let mut pbracket = vec![0.0; n];
        let mut obracket = vec![0.0; n];
        for v in tree.internal_nodes() {
            let step: f64 = tree.children(v).map(|c| tree.prob(c) * (values[c] - values[v]).abs_sq()).sum();
            for c in tree.children(v) {
                pbracket[c] = pbracket[v] + step;
                obracket[c] = obracket[v] + (values[c] - values[v]).abs_sq();
            }
        }
        TreeMartingale { values, pbracket, obracket }
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }
    pub fn value(&self, v: usize) -> S {
        self.values[v]
    }
    pub fn initial(&self) -> S {
        self.values[0]
    }
    /// ΔM on the edge into `c` (zero at the root).
    pub fn increment(&self, tree: &TreeFiltration, c: usize) -> S {
        match tree.parent(c) {
            Some(u) => self.values[c] - self.values[u],
            None => S::zero(),
        }
    }
    pub fn bracket(&self) -> &[f64] {
        &self.pbracket
    }
    pub fn optional_bracket(&self) -> &[f64] {
        &self.obracket
    }
    /// E[|ΔM|² | v] for the step out of `v` (0 at leaves).
    pub fn step_bracket(&self, tree: &TreeFiltration, v: usize) -> f64 {
        match tree.children(v).next() {
            Some(c) => self.pbracket[c] - self.pbracket[v],
            None => 0.0,
        }
    }
    pub fn into_process(self) -> TreeProcess<S> {
        TreeProcess::adapted(self.values)
    }
    pub fn as_process(&self) -> TreeProcess<S> {
        TreeProcess::adapted(self.values.clone())
    }

    /// a·self + b·other
    pub fn combine(&self, tree: &TreeFiltration, a: S, other: &Self, b: S) -> Self {
        let values = self.values.iter().zip(&other.values).map(|(&x, &y)| a * x + b * y).collect();
        Self::unchecked(tree, values)
    }
    pub fn scale(&self, tree: &TreeFiltration, a: S) -> Self {
        Self::unchecked(tree, self.values.iter().map(|&x| a * x).collect())
    }
    /// M − M₀
    pub fn centered(&self, tree: &TreeFiltration) -> Self {
        let m0 = self.values[0];
        Self::unchecked(tree, self.values.iter().map(|&x| x - m0).collect())
    }
    /// The stopped martingale M^σ.
    pub fn stopped(&self, tree: &TreeFiltration, sigma: &TreeStoppingTime) -> Self {
        let mut values = self.values.clone();
        for v in 0..tree.n_nodes() {
            if let Some(s) = sigma.stop_node_before(tree, v) {
                values[v] = self.values[s];
            }
        }
        Self::unchecked(tree, values)
    }
}

impl TreeMartingale<f64> {
    /// Remaining conditional bracket g(v) = E[⟨M⟩_T − ⟨M⟩_v | v].
    pub fn remaining_bracket(&self, tree: &TreeFiltration) -> Vec<f64> {
        let mut g = vec![0.0; tree.n_nodes()];
        for v in tree.internal_nodes().rev() {
            g[v] = self.step_bracket(tree, v) + tree.child_mean(v, |c| g[c]);
        }
        g
    }
}

impl<S: Scalar> TreeMartingale<S> {
    /// Remaining conditional bracket for any scalar type (bracket is real).
    pub fn remaining_bracket_generic(&self, tree: &TreeFiltration) -> Vec<f64> {
        let mut g = vec![0.0; tree.n_nodes()];
        for v in tree.internal_nodes().rev() {
            g[v] = self.step_bracket(tree, v) + tree.child_mean(v, |c| g[c]);
        }
        g
    }
}

/// Stopping time given by a flag per node; a path stops at its first flagged node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStoppingTime {
    flags: Vec<bool>,
}

impl TreeStoppingTime {
    pub fn new(tree: &TreeFiltration, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != tree.n_nodes() {
            return Err(Error::Dimension { expected: tree.n_nodes(), got: flags.len() });
        }
        let st = TreeStoppingTime { flags };
        for leaf in tree.leaves() {
            if st.stop_node_before(tree, leaf).is_none() {
                return Err(Error::NeverStops { leaf });
            }
        }
        Ok(st)
    }

    /// Deterministic time k.
    pub fn at_level(tree: &TreeFiltration, k: usize) -> Self {
        let k = k.min(tree.depth());
        TreeStoppingTime { flags: (0..tree.n_nodes()).map(|v| tree.level(v) == k).collect() }
    }

    /// First node where `hit` holds, else the horizon.
    pub fn first_hit(tree: &TreeFiltration, hit: impl Fn(usize) -> bool) -> Self {
        TreeStoppingTime { flags: (0..tree.n_nodes()).map(|v| tree.is_leaf(v) || hit(v)).collect() }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// First flagged node on the root-to-`v` path, `v` included.
    pub fn stop_node_before(&self, tree: &TreeFiltration, v: usize) -> Option<usize> {
        let mut found = None;
        let mut cur = Some(v);
        while let Some(u) = cur {
            if self.flags[u] {
                found = Some(u);
            }
            cur = tree.parent(u);
        }
        found
    }

    /// Per node: has the path already stopped at or before this node.
    pub fn reached(&self, tree: &TreeFiltration) -> Vec<bool> {
        let mut out = vec![false; tree.n_nodes()];
        for v in 0..tree.n_nodes() {
            out[v] = self.flags[v] || tree.parent(v).map_or(false, |u| out[u]);
        }
        out
    }

    /// The nodes where paths actually stop.
    pub fn stopping_nodes(&self, tree: &TreeFiltration) -> Vec<usize> {
        let mut out = Vec::new();
        for v in 0..tree.n_nodes() {
            if self.flags[v] && tree.parent(v).map_or(true, |u| self.stop_node_before(tree, u).is_none()) {
                out.push(v);
            }
        }
        out
    }

    /// Path-wise σ ≤ τ.
    pub fn precedes(&self, tree: &TreeFiltration, other: &TreeStoppingTime) -> bool {
        tree.leaves().all(|l| {
            let a = self.stop_node_before(tree, l).unwrap();
            let b = other.stop_node_before(tree, l).unwrap();
            tree.level(a) <= tree.level(b)
        })
    }
}

/// When to condition.
#[derive(Debug, Clone, Copy)]
pub enum At<'a> {
    Level(usize),
    Stop(&'a TreeStoppingTime),
}

/// E[x | F_{σ ∧ t}] as a process: at node v the value is the conditional
/// expectation given the information at the earlier of v and the stop.
/// `x` may hold leaf values only or one value per node (leaves are read).
pub fn conditional_expectation<S: Scalar>(tree: &TreeFiltration, x: &[S], at: At<'_>) -> Result<TreeProcess<S>> {
    let leaf_vals: &[S] = if x.len() == tree.n_leaves() {
        x
    } else if x.len() == tree.n_nodes() {
        &x[tree.leaves()]
    } else {
        return Err(Error::Dimension { expected: tree.n_leaves(), got: x.len() });
    };
    let full = tree.expect_from_leaves(leaf_vals);
    let values = (0..tree.n_nodes())
        .map(|v| {
            let anchor = match at {
                At::Level(k) => {
                    if tree.level(v) > k {
                        tree.ancestor(v, k)
                    } else {
                        v
                    }
                }
                At::Stop(st) => st.stop_node_before(tree, v).unwrap_or(v),
            };
            full[anchor]
        })
        .collect();
    Ok(TreeProcess::adapted(values))
}

/// (h∘M)_v = Σ h(parent)·ΔM along the path, started at 0.
pub fn stochastic_integral<S: Scalar>(tree: &TreeFiltration, h: &TreeProcess<S>, m: &TreeMartingale<S>) -> Result<TreeMartingale<S>> {
    if h.len() != tree.n_nodes() {
        return Err(Error::Dimension { expected: tree.n_nodes(), got: h.len() });
    }
    let mut values = vec![S::zero(); tree.n_nodes()];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            values[c] = values[v] + h.values[v] * m.increment(tree, c);
        }
    }
    Ok(TreeMartingale::unchecked(tree, values))
}

/// Predictable covariation ⟨X,Y⟩, bilinear (no conjugation).
pub fn covariation<S: Scalar>(tree: &TreeFiltration, x: &TreeMartingale<S>, y: &TreeMartingale<S>) -> TreeProcess<S> {
    let mut out = vec![S::zero(); tree.n_nodes()];
    for v in tree.internal_nodes() {
        let step = tree.child_mean(v, |c| x.increment(tree, c) * y.increment(tree, c));
        for c in tree.children(v) {
            out[c] = out[v] + step;
        }
    }
    TreeProcess::adapted(out)
}

/// Optional covariation [X,Y] = Σ ΔX ΔY.
pub fn optional_covariation<S: Scalar>(tree: &TreeFiltration, x: &TreeMartingale<S>, y: &TreeMartingale<S>) -> TreeProcess<S> {
    let mut out = vec![S::zero(); tree.n_nodes()];
    for v in tree.internal_nodes() {
        for c in tree.children(v) {
            out[c] = out[v] + x.increment(tree, c) * y.increment(tree, c);
        }
    }
    TreeProcess::adapted(out)
}

/// E[ΔX ΔY | v] per internal node (0 at leaves).
pub fn step_covariation<S: Scalar>(tree: &TreeFiltration, x: &TreeMartingale<S>, y: &TreeMartingale<S>) -> Vec<S> {
    let mut out = vec![S::zero(); tree.n_nodes()];
    for v in tree.internal_nodes() {
        out[v] = tree.child_mean(v, |c| x.increment(tree, c) * y.increment(tree, c));
    }
    out
}

#[derive(Debug, Clone)]
pub struct KwDecomposition<S> {
    /// Predictable integrand against the driver.
    pub z: TreeProcess<S>,
    pub n_perp: TreeMartingale<S>,
    /// Nodes where the driver has no conditional variance (z forced to 0).
    pub degenerate: Vec<usize>,
}

pub const DEGENERATE_VARIANCE: f64 = 1e-300;

/// n = n₀ + z∘m + n_perp with ⟨m, n_perp⟩ = 0.
pub fn kw_decompose<S: Scalar>(tree: &TreeFiltration, n: &TreeMartingale<S>, m: &TreeMartingale<S>) -> KwDecomposition<S> {
    let mut z = vec![S::zero(); tree.n_nodes()];
    let mut perp = vec![S::zero(); tree.n_nodes()];
    let mut degenerate = Vec::new();
    perp[0] = n.initial();
    for v in tree.internal_nodes() {
        let den = tree.child_mean(v, |c| m.increment(tree, c) * m.increment(tree, c));
        let var: f64 = tree.children(v).map(|c| tree.prob(c) * m.increment(tree, c).abs_sq()).sum();
        if var <= DEGENERATE_VARIANCE || den.modulus() <= DEGENERATE_VARIANCE {
            degenerate.push(v);
        } else {
            z[v] = tree.child_mean(v, |c| n.increment(tree, c) * m.increment(tree, c)) / den;
        }
        for c in tree.children(v) {
            perp[c] = perp[v] + n.increment(tree, c) - z[v] * m.increment(tree, c);
        }
    }
    // the orthogonal part carries the initial value so n = z∘m + n_perp holds
    KwDecomposition { z: TreeProcess::predictable(z), n_perp: TreeMartingale::unchecked(tree, perp), degenerate }
}

/// sup over stopping times of the ess-sup of a node functional: the max over nodes.
pub fn sup_over_stopping_times(g: &[f64]) -> f64 {
    g.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Serialized form of a tree with one real martingale on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub depth: usize,
    pub branching: usize,
    /// Transition probability into every non-root node, node order.
    pub probabilities: Vec<f64>,
    /// Martingale increment on the edge into every non-root node.
    pub increments: Vec<f64>,
    #[serde(default)]
    pub initial: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_step: Option<f64>,
}

impl TreeDocument {
    pub fn from_parts(tree: &TreeFiltration, m: &TreeMartingale<f64>) -> Self {
        TreeDocument {
            depth: tree.depth(),
            branching: tree.branching(),
            probabilities: tree.transition_probs().to_vec(),
            increments: (1..tree.n_nodes()).map(|c| m.increment(tree, c)).collect(),
            initial: m.initial(),
            time_step: Some(tree.time_step()),
        }
    }

    pub fn into_parts(&self) -> Result<(TreeFiltration, TreeMartingale<f64>)> {
        let tree = TreeFiltration::new(self.depth, self.branching, &self.probabilities, self.time_step)?;
        if self.increments.len() != tree.n_nodes() - 1 {
            return Err(Error::Dimension { expected: tree.n_nodes() - 1, got: self.increments.len() });
        }
        let mut values = vec![self.initial; tree.n_nodes()];
        for c in 1..tree.n_nodes() {
            values[c] = values[tree.parent(c).unwrap()] + self.increments[c - 1];
        }
        let m = TreeMartingale::new(&tree, values)?;
        Ok((tree, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coin() -> (TreeFiltration, TreeMartingale<f64>) {
        let t = TreeFiltration::uniform(1, 2).unwrap();
        let m = TreeMartingale::new(&t, vec![0.0, 1.0, -1.0]).unwrap();
        (t, m)
    }

    #[test]
    fn indexing_round_trips() {
        let t = TreeFiltration::uniform(3, 3).unwrap();
        assert_eq!(t.n_nodes(), 1 + 3 + 9 + 27);
        for v in 1..t.n_nodes() {
            let p = t.parent(v).unwrap();
            assert!(t.children(p).contains(&v));
            assert_eq!(t.level(p) + 1, t.level(v));
        }
        assert_eq!(t.path(t.leaves().start).len(), 4);
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(TreeFiltration::new(1, 2, &[0.6, 0.5], None).is_err());
        assert!(TreeFiltration::new(1, 2, &[1.0, 0.0], None).is_err());
        assert!(TreeFiltration::new(1, 2, &[0.5], None).is_err());
        assert!(TreeFiltration::new(0, 2, &[], None).is_err());
    }

    #[test]
    fn rejects_drift() {
        let t = TreeFiltration::uniform(1, 2).unwrap();
        assert!(matches!(TreeMartingale::new(&t, vec![0.0, 1.0, -0.5]), Err(Error::NotMartingale { .. })));
    }

    #[test]
    fn coin_expectation_and_bracket() {
        let (t, m) = coin();
        let e = conditional_expectation(&t, &[1.0, -1.0], At::Level(0)).unwrap();
        assert_eq!(e.values[0], 0.0);
        assert_eq!(m.bracket(), &[0.0, 1.0, 1.0]);
        assert_eq!(m.remaining_bracket(&t)[0], 1.0);
        assert!(conditional_expectation(&t, &[1.0, 2.0, 3.0, 4.0], At::Level(0)).is_err());
    }

    #[test]
    fn kw_of_driver_is_unit() {
        let t = TreeFiltration::uniform(2, 3).unwrap();
        let raw: Vec<f64> = (0..t.n_nodes()).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let m = TreeMartingale::from_raw_increments(&t, 0.0, &raw).unwrap();
        let kw = kw_decompose(&t, &m, &m);
        for v in t.internal_nodes() {
            assert!((kw.z.values[v] - 1.0).abs() < 1e-14);
        }
        assert!(kw.n_perp.values().iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn degenerate_nodes_flagged() {
        let t = TreeFiltration::uniform(1, 2).unwrap();
        let m = TreeMartingale::<f64>::zero(&t);
        let n = TreeMartingale::new(&t, vec![0.0, 2.0, -2.0]).unwrap();
        let kw = kw_decompose(&t, &n, &m);
        assert_eq!(kw.degenerate, vec![0]);
        assert_eq!(kw.n_perp.values(), n.values());
    }

    #[test]
    fn document_round_trip() {
        let (t, m) = coin();
        let doc = TreeDocument::from_parts(&t, &m);
        let s = serde_json::to_string(&doc).unwrap();
        let back: TreeDocument = serde_json::from_str(&s).unwrap();
        let (t2, m2) = back.into_parts().unwrap();
        assert_eq!(t, t2);
        assert_eq!(m, m2);
    }

    #[test]
    fn stopping_time_must_fire() {
        let t = TreeFiltration::uniform(2, 2).unwrap();
        let mut flags = vec![false; t.n_nodes()];
        flags[1] = true;
        assert!(matches!(TreeStoppingTime::new(&t, flags.clone()), Err(Error::NeverStops { .. })));
        flags[2] = true;
        let st = TreeStoppingTime::new(&t, flags).unwrap();
        assert_eq!(st.stopping_nodes(&t), vec![1, 2]);
    }
}
