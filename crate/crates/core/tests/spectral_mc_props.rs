use proptest::prelude::*;

use bmolab::corpus::{random_tree, Generator};
use bmolab::mc::{mean_se, MartingaleSpec, PathEnsemble, TimeGrid, Integrand};
use bmolab::spectral::{operator_matrix, spectral_radius_mc, spectral_radius_tree, SpectralMcConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_nilpotent_and_consistent(seed in any::<u64>(), d in 1usize..=4, b in 2usize..=3) {
        let (t, m) = random_tree(seed, d, b, Generator::Uniform).unwrap();
        let opm = operator_matrix(&t, &m);
        prop_assert!(opm.audit(&t, &m, 100, seed) <= 1e-12);
        prop_assert!(opm.power(d + 1).amax() <= 1e-12);
        prop_assert!(opm.nilpotency_index().unwrap() <= d + 1);
    }

    #[test]
    fn exact_norms_behave(seed in any::<u64>(), d in 2usize..=4, c in 0.1f64..5.0) {
        let (t, m) = random_tree(seed, d, 2, Generator::Skewed).unwrap();
        let opm = operator_matrix(&t, &m);
        let scaled = operator_matrix(&t, &m.scale(&t, c));
        for n in 1..=d {
            // the complex extension costs at most a factor 2
            prop_assert!(opm.complex_norm2(n) <= 2.0 * opm.norm2(n) + 1e-15);
            // homogeneity of every power
            let (a, s) = (opm.norm2(n), scaled.norm2(n));
            prop_assert!((s - c.powi(n as i32) * a).abs() <= 1e-10 * (1.0 + s));
            for k in 1..=n {
                prop_assert!(opm.norm2(n) <= opm.norm2(k) * opm.norm2(n - k) * (1.0 + 1e-12) + 1e-15);
            }
        }
        prop_assert_eq!(spectral_radius_tree(&t, &opm, 2.0, 1, seed).unwrap().radius, 0.0);
    }
}

fn time_change(paths: usize, seed: u64, scale: f64) -> PathEnsemble {
    PathEnsemble::new(MartingaleSpec::stopped_time_change().scaled(scale), TimeGrid::below_one(8, 10).unwrap(), paths, seed).unwrap()
}

#[test]
fn mc_radius_is_homogeneous() {
    let cfg = SpectralMcConfig { n_max: 4, ..Default::default() };
    let a = spectral_radius_mc(&time_change(2000, 3, 1.0), 2.0, &cfg, None).unwrap();
    let b = spectral_radius_mc(&time_change(2000, 3, 2.0), 2.0, &cfg, None).unwrap();
    assert!((b.r_hat - 2.0 * a.r_hat).abs() <= 1e-12 * b.r_hat, "{} vs {}", b.r_hat, a.r_hat);
}

#[test]
fn ensembles_are_deterministic() {
    let e = time_change(300, 17, 1.0);
    assert_eq!(e.materialize(), e.materialize());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    assert_eq!(e.materialize(), pool.install(|| e.materialize()));
}

#[test]
fn truncated_grid_reproduces_prefix() {
    let full = PathEnsemble::new(MartingaleSpec::stopped_time_change(), TimeGrid::new(0.0, 0.5, 256).unwrap(), 50, 4).unwrap().materialize();
    let half = PathEnsemble::new(MartingaleSpec::stopped_time_change(), TimeGrid::new(0.0, 0.25, 128).unwrap(), 50, 4).unwrap().materialize();
    for (name, data) in &full.channels {
        let short = half.channel(name).unwrap();
        for i in 0..50 {
            assert_eq!(&full.row(data, i)[..129], half.row(short, i), "{name} path {i}");
        }
    }
}

#[test]
fn quadrature_variance_matches_bracket() {
    let spec = MartingaleSpec { integrand: Integrand::TimeChange, scale: 1.0, stop: None, aux: vec![] };
    let grid = TimeGrid::new(0.0, 0.75, 300).unwrap();
    let e = PathEnsemble::new(spec, grid, 40_000, 8).unwrap();
    let mut sq = Vec::with_capacity(e.n_paths);
    let mut qv = 0.0;
    for i in 0..e.n_paths {
        let mut last = (0.0, 0.0);
        e.walk(i, &[bmolab::mc::Monitor::Every], |_, _, s| {
            last = (e.m_of(&s[0]), e.qv_of(&s[0]));
            true
        });
        sq.push(last.0 * last.0);
        qv = last.1;
    }
    // the same left-point rule, summed directly
    let direct: f64 = (0..grid.steps).map(|k| grid.dt() / (1.0 - grid.time(k))).sum();
    assert!((qv - direct).abs() <= 1e-12 * direct);
    let (v, se) = mean_se(&sq);
    assert!((v - direct).abs() <= 3.0 * se, "{v} vs {direct} ± {se}");
}
