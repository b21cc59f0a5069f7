mod common;

use proptest::prelude::*;

use bmolab::bmo::{bmo_norm, epsilon_slice, min_feasible_eps, norm_hp, reverse_holder_constant};
use bmolab::corpus::{random_adapted, random_martingale, random_tree, rng, Generator};
use bmolab::inequality::{verify_emery, verify_fefferman, verify_kunita_watanabe, verify_linfty_bracket, verify_lp_bracket, verify_rinf_bmo, InequalityReport, TREE_TOL};
use bmolab::tree::{TreeFiltration, TreeMartingale, TreeProcess};

fn arb_tree() -> impl Strategy<Value = (TreeFiltration, TreeMartingale<f64>, u64)> {
    (any::<u64>(), 1usize..=5, 2usize..=3, any::<bool>()).prop_map(|(seed, d, b, skew)| {
        let (t, m) = random_tree(seed, d, b, if skew { Generator::Skewed } else { Generator::Uniform }).unwrap();
        (t, m, seed)
    })
}

fn ratio_invariant(a: &InequalityReport, b: &InequalityReport, c: f64) -> bool {
    let same = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs()));
    same(a.ratio, b.ratio) && same(a.lhs * c, b.lhs) && same(a.rhs * c, b.rhs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bmo_dominates_every_node((t, m, _s) in arb_tree()) {
        let b2 = bmo_norm(&t, &m).value.powi(2);
        for r in common::remaining_bracket(&t, m.values()) {
            prop_assert!(b2 >= r * (1.0 - 1e-12));
        }
    }

    #[test]
    fn h2_norm_is_expected_bracket((t, m, _s) in arb_tree()) {
        let h2 = norm_hp(&t, &m.centered(&t), 2.0).unwrap().value;
        let eb = common::remaining_bracket(&t, m.values())[0];
        prop_assert!((h2 * h2 - eb).abs() <= 1e-12 * (1.0 + eb));
    }

    #[test]
    fn slice_count_is_monotone((t, m, _s) in arb_tree(), a in 1.0f64..3.0, b in 1.0f64..3.0) {
        let base = min_feasible_eps(&t, &m);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let fine = epsilon_slice(&t, &m, base * lo).unwrap();
        let coarse = epsilon_slice(&t, &m, base * hi).unwrap();
        prop_assert!(fine.count() >= coarse.count());
        prop_assert!(fine.validates(1e-12) && coarse.validates(1e-12));
    }

    #[test]
    fn reverse_holder_jensen((t, m, _s) in arb_tree(), p in 1.0f64..3.0, dp in 0.0f64..3.0) {
        let l: Vec<f64> = m.values().iter().map(|x| (0.5 * x).exp()).collect();
        let q = p + dp;
        let cp = reverse_holder_constant(&t, &l, p).unwrap().value;
        let cq = reverse_holder_constant(&t, &l, q).unwrap().value;
        prop_assert!(cq.powf(1.0 / q) >= cp.powf(1.0 / p) * (1.0 - 1e-12));
    }

    #[test]
    fn verifiers_are_scale_invariant((t, m, seed) in arb_tree(), c in 0.01f64..100.0, p in 1.0f64..4.0) {
        let mut r = rng(seed ^ 9);
        let x = random_martingale(&t, &mut r);
        let xs = x.scale(&t, c);
        let a = random_adapted(&t, &mut r, 1.0);
        let asc = TreeProcess::adapted(a.values.iter().map(|v| v * c).collect());
        let h = random_adapted(&t, &mut r, 1.0);
        let k = random_adapted(&t, &mut r, 1.0);
        let tol = TREE_TOL;
        let pairs = [
            (verify_fefferman(&t, &x, &m, tol).unwrap(), verify_fefferman(&t, &xs, &m, tol).unwrap()),
            (verify_emery(&t, &a, &m, p, tol).unwrap(), verify_emery(&t, &asc, &m, p, tol).unwrap()),
            (verify_lp_bracket(&t, &x, &m, p, tol).unwrap(), verify_lp_bracket(&t, &xs, &m, p, tol).unwrap()),
            (verify_linfty_bracket(&t, &x, &m, tol).unwrap(), verify_linfty_bracket(&t, &xs, &m, tol).unwrap()),
            (verify_rinf_bmo(&t, &a, &m, tol).unwrap(), verify_rinf_bmo(&t, &asc, &m, tol).unwrap()),
            (verify_kunita_watanabe(&t, &x, &m, &h, &k, p.max(1.01), tol).unwrap(), verify_kunita_watanabe(&t, &xs, &m, &h, &k, p.max(1.01), tol).unwrap()),
        ];
        for (a, b) in &pairs {
            prop_assert!(ratio_invariant(a, b, c), "{}: {} vs {}", a.name, a.ratio, b.ratio);
        }
    }

    #[test]
    fn pass_flag_matches_recorded_numbers((t, m, seed) in arb_tree()) {
        let x = random_martingale(&t, &mut rng(seed ^ 4));
        for rep in [verify_fefferman(&t, &x, &m, TREE_TOL).unwrap(), verify_linfty_bracket(&t, &x, &m, TREE_TOL).unwrap()] {
            prop_assert!(rep.pass);
            prop_assert_eq!(rep.pass, rep.lhs <= rep.rhs * (1.0 + rep.tol));
        }
    }
}

#[test]
fn bmo_matches_enumeration_on_small_trees() {
    for seed in 0..40 {
        let (t, m) = random_tree(seed, 3, 2 + (seed % 2) as usize, Generator::Skewed).unwrap();
        let a = bmo_norm(&t, &m).value;
        let b = common::brute_bmo(&t, &m);
        assert!((a - b).abs() <= 1e-12 * (1.0 + b), "{a} vs {b}");
    }
}

#[test]
fn enumeration_counts_stopping_times() {
    // binary tree: s(0) = 1, s(d) = 1 + s(d−1)²
    let t = TreeFiltration::uniform(4, 2).unwrap();
    assert_eq!(common::cuts(&t, 0).len(), 677);
    let t = TreeFiltration::uniform(3, 3).unwrap();
    assert_eq!(common::cuts(&t, 0).len(), 730);
}
