mod common;

use std::f64::consts::SQRT_2;

use proptest::prelude::*;

use bmolab::corpus::{random_martingale, rng};
use bmolab::linear::{fundamental, girsanov, random_linear_case, linear_sde_residual, matrix_hp, solve_linear_sde, Matrix};
use bmolab::solvers::{
    budget_bsde, budget_bsde_bmo, budget_se, feasible_levels, min_slice_levels_bsde, min_slice_levels_se, rho_bsde, rho_se, solve_bsde, solve_bsde_bmo, solve_se, Coefficient,
    CoefficientKind, CoefficientRecipe, SolverConfig, SpecRecipe,
};
use bmolab::tree::{stochastic_integral, TreeProcess};

const KINDS: [CoefficientKind; 4] = [CoefficientKind::Linear, CoefficientKind::Matrix, CoefficientKind::Sine, CoefficientKind::RunningMax];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn budget_formulas_are_exact(seed in any::<u64>(), e1 in 0.01f64..0.5, e2 in 0.01f64..0.5, e3 in 0.01f64..0.5, p in 1.2f64..4.0) {
        let mut r = SpecRecipe::new(3, 2, seed);
        r.p = p;
        r.f = CoefficientRecipe::new(CoefficientKind::Linear, 0.7);
        r.g = CoefficientRecipe::new(CoefficientKind::Sine, 0.2);
        r.gy = CoefficientRecipe::new(CoefficientKind::Sine, 0.2);
        r.gz = CoefficientRecipe::new(CoefficientKind::Linear, 0.2);
        let (t, se) = r.build_se().unwrap();
        // ‖α∘N₁‖_BMO computed from scratch
        let alpha_bmo = |f: &Coefficient, n1| {
            let Coefficient::Linear(c) = f else { unreachable!() };
            let alpha = TreeProcess::predictable(c.iter().map(|x| x.abs()).collect());
            common::brute_bmo(&t, &stochastic_integral(&t, &alpha, n1).unwrap())
        };
        let a_bmo = alpha_bmo(&se.f, &se.n1);
        let b = budget_se(&t, &se, e1, e2, 2.0).unwrap();
        let rho1 = 2.0 * p * e1 * a_bmo + SQRT_2 * e2 * 2.0;
        prop_assert!((b.rho - rho1).abs() <= 1e-12 * rho1);
        prop_assert_eq!(b.rho, rho_se(p, e1, e2, 2.0, b.alpha_bmo));
        let (_, bs) = r.build_bsde().unwrap();
        let bb = budget_bsde(&t, &bs, e1, e2, e3, 2.0).unwrap();
        let a_bmo = alpha_bmo(&bs.f, &bs.n1);
        let q = p / (p - 1.0);
        let cbar = q * 3.0 + 2.0;
        let rho2 = cbar * (SQRT_2 * p * e3).max(2.0 * p * a_bmo * e1 + 2.0 * p * e2 * e2);
        prop_assert!((bb.rho - rho2).abs() <= 1e-12 * rho2);
        prop_assert_eq!(bb.rho, rho_bsde(p, e1, e2, e3, 2.0, bb.alpha_bmo).0);
        prop_assert_eq!(budget_bsde_bmo(e3).rho, SQRT_2 * e3);
    }

    #[test]
    fn envelopes_bound_coefficients(seed in any::<u64>(), k in 0usize..4, dim in 1usize..=3) {
        let mut r = SpecRecipe::new(3, 3, seed);
        r.dim = dim;
        r.f = CoefficientRecipe::new(KINDS[k], 0.8);
        let (t, spec) = r.build_se().unwrap();
        prop_assert!(spec.f.audit_envelope(&t, dim, 4, seed) <= 1.0 + 1e-12);
    }

    #[test]
    fn forward_slices_chain_and_solve(seed in any::<u64>(), k in 0usize..4) {
        let mut r = SpecRecipe::new(4, 3, seed);
        r.driver_scale = 0.1;
        r.f = CoefficientRecipe::new(KINDS[k], 1.0);
        r.g = CoefficientRecipe::new(KINDS[(k + 1) % 4], 0.1);
        let (t, spec) = r.build_se().unwrap();
        let [e1, e2] = feasible_levels([0.15, 0.15], min_slice_levels_se(&t, &spec).unwrap());
        let budget = budget_se(&t, &spec, e1, e2, 2.0).unwrap();
        let out = solve_se(&t, &spec, &budget, &SolverConfig::default()).unwrap();
        prop_assert!(out.report.converged);
        prop_assert!(out.report.residual <= 1e-10);
        for c in &out.report.certificates {
            prop_assert!(c.validates(1e-12));
        }
        prop_assert!(out.report.apriori.is_finite());
    }

    #[test]
    fn backward_orthogonality_and_uniqueness(seed in any::<u64>(), k in 0usize..4) {
        let mut r = SpecRecipe::new(3, 3, seed);
        r.driver_scale = 0.1;
        r.f = CoefficientRecipe::new(KINDS[k], 0.5);
        r.gy = CoefficientRecipe::new(KINDS[(k + 1) % 4], 0.01);
        r.gz = CoefficientRecipe::new(KINDS[(k + 2) % 4], 0.03);
        let (t, spec) = r.build_bsde().unwrap();
        let [e1, e2, e3] = feasible_levels([0.15, 0.1, 0.03], min_slice_levels_bsde(&t, &spec).unwrap());
        let budget = budget_bsde(&t, &spec, e1, e2, e3, 2.0).unwrap();
        let a = solve_bsde(&t, &spec, &budget, &SolverConfig { initial: bmolab::solvers::InitialGuess::Zero, ..SolverConfig::default() }).unwrap();
        let b = solve_bsde(&t, &spec, &budget, &SolverConfig::default()).unwrap();
        let (sa, sb) = (a.solution.unwrap(), b.solution.unwrap());
        let perp: Vec<f64> = sa.m_perp.iter().map(|x| x[0]).collect();
        prop_assert!(common::max_conditional_covariation(&t, spec.m.values(), &perp) <= 1e-12);
        let gap = sa.y.iter().zip(&sb.y).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
        prop_assert!(gap <= 2e-10, "{gap}");
        prop_assert!(a.report.residual <= 1e-10);
    }

    #[test]
    fn fundamental_flow_property(seed in any::<u64>(), dim in 1usize..=3) {
        let case = random_linear_case(seed, 4, 2, dim, 0.4).unwrap();
        let t = &case.tree;
        let fs = fundamental(t, &case.drivers).unwrap();
        for v in t.leaves() {
            for s in t.path(v) {
                let lhs = &fs.s[v];
                let rhs = fs.transition(t, s, v) * &fs.s[s];
                prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + lhs.amax()));
            }
        }
        prop_assert!(fs.inverse_defect() <= 1e-10);
        prop_assert_eq!(fs.recursion_defect(t), 0.0);
    }

    #[test]
    fn girsanov_moves_expectations(seed in any::<u64>()) {
        let case = random_linear_case(seed, 4, 3, 1, 0.3).unwrap();
        let t = &case.tree;
        let coef: Vec<f64> = case.drivers.d.iter().map(|x| x[(0, 0)]).collect();
        let mut r = rng(seed);
        let target = random_martingale(t, &mut r);
        let g = girsanov(t, &coef, &case.drivers.m, &[target]).unwrap();
        // the density is a positive P-martingale
        prop_assert!(g.density.iter().all(|&d| d > 0.0));
        prop_assert!((t.expect_leaves(|l| g.density[l]) - 1.0).abs() <= 1e-12);
        for x in [&g.m_q, &g.targets_q[0]] {
            let (ep, eq) = g.expectations(t, |l| x[l]);
            prop_assert!((ep - eq).abs() <= 1e-12 * (1.0 + ep.abs()));
        }
        prop_assert!(g.audit <= 1e-10);
    }

    #[test]
    fn linear_sde_solution_is_finite(seed in any::<u64>()) {
        let case = random_linear_case(seed, 4, 2, 1, 0.3).unwrap();
        let t = &case.tree;
        let mut r = rng(seed ^ 5);
        let v: Vec<Matrix> = random_martingale(t, &mut r).values().iter().map(|&x| Matrix::from_element(1, 1, x)).collect();
        let x = solve_linear_sde(t, &case.drivers, &v).unwrap();
        prop_assert!(linear_sde_residual(t, &case.drivers, &v, &x) <= 1e-12);
        prop_assert!(matrix_hp(t, &x, 1.0).is_finite());
    }
}

#[test]
fn zero_coefficients_return_forcing() {
    for seed in 0..5 {
        let (t, spec) = SpecRecipe::new(4, 3, seed).build_se().unwrap();
        let b = budget_se(&t, &spec, 0.5, 0.5, 2.0).unwrap();
        assert_eq!(b.rho, 0.0);
        let x = solve_se(&t, &spec, &b, &SolverConfig::default()).unwrap().solution.unwrap().x;
        assert_eq!(x, spec.forcing);
    }
}

#[test]
fn bmo_variant_slices_stay_in_budget() {
    for seed in 0..10 {
        let mut r = SpecRecipe::new(4, 3, seed);
        r.forcing_scale = 0.0;
        r.gz = CoefficientRecipe::new(KINDS[seed as usize % 4], 0.3);
        let (t, spec) = r.build_bsde().unwrap();
        let eps = feasible_levels([0.5], [min_slice_levels_bsde(&t, &spec).unwrap()[2]])[0];
        let budget = budget_bsde_bmo(eps);
        let out = solve_bsde_bmo(&t, &spec, &budget, &SolverConfig::default()).unwrap();
        assert!(out.report.converged);
        for s in &out.report.slices {
            if let (Some(m), Some(b)) = (s.max_ratio, s.bound) {
                assert!(m <= b + 0.05, "slice {} ratio {m} bound {b}", s.slice);
            }
        }
        for c in &out.report.certificates {
            assert!(c.validates(1e-12));
            for (i, b) in c.slice_bmo.iter().enumerate() {
                assert!(b.is_finite(), "slice {i}");
            }
        }
    }
}
