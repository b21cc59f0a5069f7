//! Seeded random trees and processes for randomized corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{ProcessKind, TreeFiltration, TreeMartingale, TreeProcess};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Random transition probabilities, Gaussian increments with a random scale per node.
    Uniform,
    /// Equal probabilities and symmetric ±1 style increments.
    Coin,
    /// Random probabilities, increments whose scale varies strongly across nodes.
    Skewed,
}

impl std::str::FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Generator::Uniform),
            "coin" => Ok(Generator::Coin),
            "skewed" => Ok(Generator::Skewed),
            other => Err(Error::Config(format!("unknown generator '{other}' (known: uniform, coin, skewed)"))),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random positive probability vector of length `b`.
pub fn random_simplex(rng: &mut impl Rng, b: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..b).map(|_| 0.25 + rng.gen::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / s).collect();
    // put the rounding residue on the largest entry so the sum is 1 to the last bit
    let total: f64 = p.iter().sum();
    let imax = (0..b).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
    p[imax] += 1.0 - total;
    p
}

pub fn random_tree(seed: u64, depth: usize, branching: usize, generator: Generator) -> Result<(TreeFiltration, TreeMartingale<f64>)> {
    let mut r = rng(seed);
    let tree = match generator {
        Generator::Coin => TreeFiltration::uniform(depth, branching)?,
        _ => {
            let n = TreeFiltration::node_count(depth, branching);
            let mut probs = Vec::with_capacity(n - 1);
            for _ in 0..(n - 1) / branching {
                probs.extend(random_simplex(&mut r, branching));
            }
            TreeFiltration::new(depth, branching, &probs, None)?
        }
    };
    let m = random_martingale_with(&tree, &mut r, generator);
    Ok((tree, m))
}

fn random_martingale_with(tree: &TreeFiltration, r: &mut impl Rng, generator: Generator) -> TreeMartingale<f64> {
    let mut raw = vec![0.0; tree.n_nodes()];
    let initial = match generator {
        Generator::Coin => 0.0,
        _ => r.gen_range(-1.0..1.0),
    };
    for v in tree.internal_nodes() {
        let scale = match generator {
            Generator::Uniform => r.gen_range(0.2..1.2),
            Generator::Coin => 1.0,
            Generator::Skewed => 0.05 + 1.5 * r.gen::<f64>().powi(3),
        };
        for (j, c) in tree.children(v).enumerate() {
            raw[c] = match generator {
                Generator::Coin => {
                    let b = tree.branching() as f64;
                    scale * (2.0 * j as f64 / (b - 1.0) - 1.0)
                }
                _ => scale * r.sample::<f64, _>(StandardNormal),
            };
        }
    }
    TreeMartingale::from_raw_increments(tree, initial, &raw).expect("sizes match")
}

/// A fresh random martingale on an existing tree.
pub fn random_martingale(tree: &TreeFiltration, r: &mut impl Rng) -> TreeMartingale<f64> {
    random_martingale_with(tree, r, Generator::Uniform)
}

/// Random bounded adapted process, one value per node.
pub fn random_adapted(tree: &TreeFiltration, r: &mut impl Rng, amplitude: f64) -> TreeProcess<f64> {
    TreeProcess::from_fn(tree, ProcessKind::Adapted, |_| amplitude * r.gen_range(-1.0..1.0))
}

pub fn random_predictable(tree: &TreeFiltration, r: &mut impl Rng, amplitude: f64) -> TreeProcess<f64> {
    let mut p = random_adapted(tree, r, amplitude);
    p.kind = ProcessKind::Predictable;
    p
}

/// Corpus member: tree, its martingale, and the member seed used to derive extra inputs.
#[derive(Debug, Clone)]
pub struct CorpusMember {
    pub id: usize,
    pub seed: u64,
    pub tree: TreeFiltration,
    pub martingale: TreeMartingale<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusSpec {
    pub n: usize,
    /// Members draw depth uniformly from 1..=max_depth.
    pub depth: usize,
    /// Members draw branching uniformly from this list.
    pub branching: Vec<usize>,
    pub seed: u64,
    pub generator: Generator,
}

impl CorpusSpec {
    pub fn new(n: usize, depth: usize, branching: Vec<usize>, seed: u64) -> Self {
        CorpusSpec { n, depth, branching, seed, generator: Generator::Uniform }
    }

    pub fn member_seed(&self, i: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    pub fn member(&self, i: usize) -> Result<CorpusMember> {
        if self.branching.is_empty() || self.depth == 0 {
            return Err(Error::Config("corpus needs depth ≥ 1 and a branching list".into()));
        }
        let seed = self.member_seed(i);
        let mut r = rng(seed ^ 0x5555);
        let depth = r.gen_range(1..=self.depth);
        let branching = self.branching[r.gen_range(0..self.branching.len())];
        let (tree, martingale) = random_tree(seed, depth, branching, self.generator)?;
        Ok(CorpusMember { id: i, seed, tree, martingale })
    }

    pub fn members(&self) -> Result<Vec<CorpusMember>> {
        (0..self.n).map(|i| self.member(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_sums_to_one() {
        let mut r = rng(3);
        for b in 2..6 {
            let p = random_simplex(&mut r, b);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            assert!(p.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn trees_are_reproducible() {
        let a = random_tree(11, 3, 3, Generator::Uniform).unwrap();
        let b = random_tree(11, 3, 3, Generator::Uniform).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn corpus_members_vary() {
        let spec = CorpusSpec::new(20, 4, vec![2, 3], 1);
        let ms = spec.members().unwrap();
        assert!(ms.iter().any(|m| m.tree.depth() != ms[0].tree.depth()));
    }
}
