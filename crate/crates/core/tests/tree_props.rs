mod common;

use proptest::prelude::*;

use bmolab::corpus::{random_adapted, random_martingale, random_predictable, random_tree, rng, Generator};
use bmolab::tree::{conditional_expectation, covariation, kw_decompose, optional_covariation, stochastic_integral, step_covariation, At, TreeDocument, TreeFiltration, TreeMartingale, TreeProcess};

fn generator(i: u8) -> Generator {
    [Generator::Uniform, Generator::Skewed, Generator::Coin][i as usize % 3]
}

fn arb_tree() -> impl Strategy<Value = (TreeFiltration, TreeMartingale<f64>, u64)> {
    (any::<u64>(), 1usize..=5, 2usize..=3, any::<u8>()).prop_map(|(seed, d, b, g)| {
        let (t, m) = random_tree(seed, d, b, generator(g)).unwrap();
        (t, m, seed)
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tower_property((t, _m, seed) in arb_tree(), j in 0usize..5, k in 0usize..6) {
        let mut r = rng(seed);
        let x: Vec<f64> = random_adapted(&t, &mut r, 2.0).values;
        let (j, k) = (j.min(t.depth()), k.min(t.depth()).max(j.min(t.depth())));
        let inner = conditional_expectation(&t, &x, At::Level(k)).unwrap();
        let twice = conditional_expectation(&t, &inner.values, At::Level(j)).unwrap();
        let once = conditional_expectation(&t, &x, At::Level(j)).unwrap();
        for (a, b) in twice.values.iter().zip(&once.values) {
            prop_assert!(close(*a, *b, 1e-13), "{a} vs {b}");
        }
    }

    #[test]
    fn integration_by_parts((t, x, seed) in arb_tree()) {
        let y = random_martingale(&t, &mut rng(seed ^ 1));
        let xm = stochastic_integral(&t, &TreeProcess::predictable(x.values().to_vec()), &y).unwrap();
        let ym = stochastic_integral(&t, &TreeProcess::predictable(y.values().to_vec()), &x).unwrap();
        let br = optional_covariation(&t, &x, &y);
        for l in t.leaves() {
            let rhs = x.value(l) * y.value(l) - x.initial() * y.initial() - xm.value(l) - ym.value(l);
            prop_assert!((br.values[l] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{} vs {rhs}", br.values[l]);
        }
    }

    #[test]
    fn kw_orthogonal_part_is_idempotent((t, m, seed) in arb_tree()) {
        let n = random_martingale(&t, &mut rng(seed ^ 2));
        let first = kw_decompose(&t, &n, &m);
        let again = kw_decompose(&t, &first.n_perp, &m);
        let scale = first.z.values.iter().fold(1.0f64, |a, z| a.max(z.abs()));
        for z in &again.z.values {
            prop_assert!(z.abs() <= 1e-12 * scale, "{z}");
        }
        // and it is orthogonal to the driver, conditionally at every node
        prop_assert!(common::max_conditional_covariation(&t, m.values(), first.n_perp.values()) <= 1e-12);
    }

    #[test]
    fn bracket_is_associative((t, m, seed) in arb_tree()) {
        let mut r = rng(seed ^ 3);
        let n = random_martingale(&t, &mut r);
        let h = random_predictable(&t, &mut r, 1.5);
        let hm = stochastic_integral(&t, &h, &m).unwrap();
        let lhs = covariation(&t, &hm, &n);
        let step = step_covariation(&t, &m, &n);
        let mut acc = vec![0.0; t.n_nodes()];
        for v in t.internal_nodes() {
            for c in t.children(v) {
                acc[c] = acc[v] + h.values[v] * step[v];
            }
        }
        for (a, b) in lhs.values.iter().zip(&acc) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn predictable_bracket_matches_oracle((t, m, _s) in arb_tree()) {
        let oracle = common::remaining_bracket(&t, m.values());
        let lib = m.remaining_bracket(&t);
        for (a, b) in lib.iter().zip(&oracle) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn document_round_trips((t, m, _s) in arb_tree()) {
        let doc = TreeDocument::from_parts(&t, &m);
        let text = serde_json::to_string(&doc).unwrap();
        let back: TreeDocument = serde_json::from_str(&text).unwrap();
        let (t2, m2) = back.into_parts().unwrap();
        prop_assert_eq!(t2.n_nodes(), t.n_nodes());
        // values are rebuilt from edge increments, so they agree up to rounding
        for (a, b) in m2.values().iter().zip(m.values()) {
            prop_assert!(close(*a, *b, 1e-14));
        }
        for (a, b) in t2.transition_probs().iter().zip(t.transition_probs()) {
            prop_assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn construction_is_deterministic(seed in any::<u64>(), d in 1usize..=4, b in 2usize..=3, g in any::<u8>()) {
        let (t1, m1) = random_tree(seed, d, b, generator(g)).unwrap();
        let (t2, m2) = random_tree(seed, d, b, generator(g)).unwrap();
        prop_assert_eq!(t1.transition_probs(), t2.transition_probs());
        prop_assert_eq!(m1.values(), m2.values());
    }
}
