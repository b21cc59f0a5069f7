use rayon::prelude::*;

use bmolab::bmo::{bmo_norm, min_feasible_eps};
use bmolab::corpus::{random_martingale, rng, CorpusSpec};
use bmolab::counterexample::{build_scenario, build_scenario_in, moment_blowup_scan, verify_solution, Clock, ScanVerdict};
use bmolab::exponent::{estimate_a, estimate_b, ExponentConfig};
use bmolab::inequality::{verify_member, Inequality, TREE_TOL};
use bmolab::linear::{compare_explicit_picard, continuation_scan, fundamental, girsanov, inverse_sde_gap, random_linear_case, random_probe, reverse_holder_matrix, rhi_probe};
use bmolab::report::Backend;
use bmolab::solvers::{
    budget_bsde, budget_bsde_bmo, budget_se, feasible_levels, min_slice_levels_bsde, min_slice_levels_se, solve_bsde, solve_bsde_bmo, solve_se, CoefficientKind, CoefficientRecipe,
    InitialGuess, SolveReport, SolverConfig, SpecRecipe,
};
use bmolab::spectral::{operator_matrix, spectral_radius_mc, spectral_radius_tree, tree_equivalence, SpectralMcConfig};
use bmolab::tree::TreeDocument;

use crate::bundle::{Bundle, TypedReport};
use crate::*;

const DEFAULT_CORPUS: &str = "seeded:{n:100,depth:4,branching:2|3}";

fn need_seed(seed: Option<u64>) -> CliResult<u64> {
    seed.ok_or_else(|| usage("--seed is required for Monte Carlo runs"))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// p grid for the inequalities that depend on p.
fn p_grid(ineq: Inequality, given: &Option<Vec<f64>>) -> Vec<Option<f64>> {
    let default: &[f64] = match ineq {
        Inequality::Emery => &[1.0, 2.0, 4.0],
        Inequality::LpBracket => &[1.0, 1.5, 2.0, 4.0],
        Inequality::KunitaWatanabe => &[2.0],
        _ => return vec![None],
    };
    given.clone().unwrap_or_else(|| default.to_vec()).into_iter().map(Some).collect()
}

pub fn verify(a: &VerifyArgs) -> CliResult<Bundle> {
    let seed = a.seed.unwrap_or(0);
    let members = corpus_members(a.corpus.as_deref().unwrap_or(DEFAULT_CORPUS), seed)?;
    let tol = a.tol.unwrap_or(TREE_TOL);
    let ineqs: Vec<Inequality> = match a.ineq.as_deref() {
        None | Some("all") => Inequality::ALL.to_vec(),
        Some(s) => s.split(',').map(|x| x.trim().parse()).collect::<bmolab::Result<_>>()?,
    };
    let mut b = Bundle::default();
    let mut rows = Vec::new();
    for ineq in ineqs {
        for p in p_grid(ineq, &a.p) {
            let reps = members.par_iter().map(|m| verify_member(ineq, m, p.unwrap_or(2.0), tol)).collect::<bmolab::Result<Vec<_>>>()?;
            for r in reps {
                let id = r.corpus_id.unwrap_or(0);
                let label = match p {
                    Some(p) => format!("{}[p={p}]#{id}", r.name),
                    None => format!("{}#{id}", r.name),
                };
                rows.push(vec![id.to_string(), r.name.clone(), opt(p), num(r.lhs), num(r.rhs), num(r.ratio), r.pass.to_string()]);
                let mut t = TypedReport::new("inequality", label, Backend::Tree, "lhs ≤ rhs·(1 + tol); ratio = lhs/rhs", &r).check(r.pass);
                if let Some(p) = p {
                    t = t.p(p);
                }
                b.push(t);
            }
        }
    }
    b.table("inequalities.csv", &["corpus_id", "inequality", "p", "lhs", "rhs", "ratio", "pass"], rows);
    Ok(b)
}

const KINDS: [CoefficientKind; 4] = [CoefficientKind::Linear, CoefficientKind::Matrix, CoefficientKind::Sine, CoefficientKind::RunningMax];

/// Random specs whose coefficient families cycle with the index.
pub fn default_recipe(eq: Equation, depth: usize, branching: usize, seed: u64, i: usize) -> SpecRecipe {
    let kind = |j: usize| KINDS[(i + j) % KINDS.len()];
    let mut r = SpecRecipe::new(depth, branching, seed);
    match eq {
        Equation::Se => {
            r.driver_scale = 0.1;
            r.f = CoefficientRecipe::new(kind(0), 1.0);
            r.g = CoefficientRecipe::new(kind(1), 0.1);
        }
        Equation::Bsde => {
            r.driver_scale = 0.1;
            r.f = CoefficientRecipe::new(kind(0), 0.5);
            r.gy = CoefficientRecipe::new(kind(1), 0.01);
            r.gz = CoefficientRecipe::new(kind(2), 0.03);
        }
        Equation::BsdeBmo => {
            r.forcing_scale = 0.0;
            r.gz = CoefficientRecipe::new(kind(0), 0.3);
        }
    }
    r
}

fn default_eps(eq: Equation) -> Vec<f64> {
    match eq {
        Equation::Se => vec![0.15, 0.15],
        Equation::Bsde => vec![0.15, 0.1, 0.03],
        Equation::BsdeBmo => vec![0.5],
    }
}

fn levels<const N: usize>(given: &[f64]) -> CliResult<[f64; N]> {
    given.try_into().map_err(|_| usage(format!("--eps needs {N} values for this equation")))
}

struct SolveRow {
    id: usize,
    seed: u64,
    report: Option<SolveReport>,
    rho: f64,
    feasible: bool,
    uniqueness: Option<f64>,
    passed: Option<bool>,
}

fn solve_one(eq: Equation, recipe: &SpecRecipe, id: usize, eps: &[f64], cfg: &SolverConfig) -> CliResult<SolveRow> {
    let mut row = SolveRow { id, seed: recipe.seed, report: None, rho: f64::NAN, feasible: false, uniqueness: None, passed: None };
    match eq {
        Equation::Se => {
            let (t, spec) = recipe.build_se()?;
            let [e1, e2] = feasible_levels(levels::<2>(eps)?, min_slice_levels_se(&t, &spec)?);
            let budget = budget_se(&t, &spec, e1, e2, 2.0)?;
            row.rho = budget.rho;
            row.feasible = budget.feasible;
            if budget.feasible {
                let out = solve_se(&t, &spec, &budget, cfg)?;
                let r = out.report;
                row.passed = Some(r.converged && r.residual <= 1e-10 && r.max_ratio.map_or(true, |m| m <= budget.rho + 0.05));
                row.report = Some(r);
            }
        }
        Equation::Bsde => {
            let (t, spec) = recipe.build_bsde()?;
            let [e1, e2, e3] = feasible_levels(levels::<3>(eps)?, min_slice_levels_bsde(&t, &spec)?);
            let budget = budget_bsde(&t, &spec, e1, e2, e3, 2.0)?;
            row.rho = budget.rho;
            row.feasible = budget.feasible;
            if budget.feasible {
                let a = solve_bsde(&t, &spec, &budget, cfg)?;
                let other = SolverConfig { initial: if cfg.initial == InitialGuess::Zero { InitialGuess::Forcing } else { InitialGuess::Zero }, ..*cfg };
                let b2 = solve_bsde(&t, &spec, &budget, &other)?;
                if let (Some(x), Some(y)) = (&a.solution, &b2.solution) {
                    row.uniqueness = Some(x.y.iter().zip(&y.y).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max));
                }
                let r = a.report;
                row.passed = Some(r.converged && r.residual <= 1e-10 && r.orthogonality.map_or(false, |o| o <= 1e-12) && row.uniqueness.map_or(false, |u| u <= 2e-10));
                row.report = Some(r);
            }
        }
        Equation::BsdeBmo => {
            let (t, spec) = recipe.build_bsde()?;
            let [e] = feasible_levels(levels::<1>(eps)?, [min_slice_levels_bsde(&t, &spec)?[2]]);
            let budget = budget_bsde_bmo(e);
            row.rho = budget.rho;
            row.feasible = budget.feasible;
            if budget.feasible {
                let r = solve_bsde_bmo(&t, &spec, &budget, cfg)?.report;
                let within = r.slices.iter().all(|s| match (s.max_ratio, s.bound) {
                    (Some(m), Some(b)) => m <= b + 0.05,
                    _ => true,
                });
                row.passed = Some(r.converged && r.residual <= 1e-10 && within);
                row.report = Some(r);
            }
        }
    }
    Ok(row)
}

pub fn solve(a: &SolveArgs) -> CliResult<Bundle> {
    let eq = a.equation.unwrap_or(Equation::Se);
    let seed = a.seed.unwrap_or(0);
    let cfg = SolverConfig {
        tol: a.tol.unwrap_or(1e-12),
        max_iter: a.max_iter.unwrap_or(500),
        initial: match a.initial.unwrap_or(Guess::Forcing) {
            Guess::Zero => InitialGuess::Zero,
            Guess::Forcing => InitialGuess::Forcing,
        },
    };
    let eps = a.eps.clone().unwrap_or_else(|| default_eps(eq));
    let recipes: Vec<SpecRecipe> = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            vec![serde_json::from_str(&text).map_err(|e| usage(format!("spec {}: {e}", path.display())))?]
        }
        None => (0..a.count.unwrap_or(10)).map(|i| default_recipe(eq, a.depth.unwrap_or(4), a.branching.unwrap_or(2), seed.wrapping_add(i as u64), i)).collect(),
    };
    let rows = recipes.par_iter().enumerate().map(|(i, r)| solve_one(eq, r, i, &eps, &cfg)).collect::<CliResult<Vec<_>>>()?;
    let mut b = Bundle::default();
    let mut table = Vec::new();
    let def = "slice-wise Picard: max_ratio is the largest observed ratio of successive iterate distances, rho the predicted contraction bound, residual the largest defect of the defining recursion";
    for (r, recipe) in rows.iter().zip(&recipes) {
        let rep = &r.report;
        table.push(vec![
            r.id.to_string(),
            r.seed.to_string(),
            format!("{eq:?}").to_lowercase(),
            r.feasible.to_string(),
            num(r.rho),
            rep.as_ref().map(|x| x.slice_count.to_string()).unwrap_or_default(),
            rep.as_ref().map(|x| x.slices.iter().map(|s| s.iterations).sum::<usize>().to_string()).unwrap_or_default(),
            opt(rep.as_ref().and_then(|x| x.max_ratio)),
            opt(rep.as_ref().map(|x| x.residual)),
            opt(rep.as_ref().and_then(|x| x.orthogonality)),
            opt(r.uniqueness),
            rep.as_ref().map(|x| x.converged.to_string()).unwrap_or_default(),
            r.passed.map(|x| x.to_string()).unwrap_or_else(|| "skipped".into()),
        ]);
        let data = serde_json::json!({ "recipe": recipe, "rho": bundle::to_value(r.rho), "feasible": r.feasible, "uniqueness_gap": r.uniqueness, "report": rep });
        let mut t = TypedReport::new("solve", format!("{eq:?}#{}", r.id).to_lowercase(), Backend::Tree, def, data).p(recipe.p);
        t.passed = r.passed;
        b.push(t);
    }
    b.table("solve.csv", &["id", "seed", "equation", "feasible", "rho", "slices", "iterations", "max_ratio", "residual", "orthogonality", "uniqueness_gap", "converged", "passed"], table);
    Ok(b)
}

pub fn linear(a: &LinearArgs) -> CliResult<Bundle> {
    let seed = a.seed.unwrap_or(0);
    let (depth, branching, dim) = (a.depth.unwrap_or(4), a.branching.unwrap_or(2), a.dim.unwrap_or(1));
    let (scale, p, eps) = (a.scale.unwrap_or(0.03), a.p.unwrap_or(2.0), a.eps.unwrap_or(0.035));
    if dim == 0 {
        return Err(usage("--dim must be ≥ 1"));
    }
    let per = (0..a.count.unwrap_or(5))
        .into_par_iter()
        .map(|i| -> CliResult<(serde_json::Value, Vec<String>, bool)> {
            let s = seed.wrapping_add(i as u64);
            let case = random_linear_case(s, depth, branching, dim, scale)?;
            let t = &case.tree;
            let fs = fundamental(t, &case.drivers)?;
            let inverse_defect = fs.inverse_defect();
            let recursion_defect = fs.recursion_defect(t);
            let sde_gap = inverse_sde_gap(t, &case.drivers);
            let rh = reverse_holder_matrix(t, &fs, p)?;
            let scan = continuation_scan(t, &fs, &[1.5, 2.0, 3.0, 4.0, 6.0])?;
            let cmp = compare_explicit_picard(&case, p, eps, &SolverConfig::default())?;
            let mut r = rng(s ^ 0x5151);
            let mut rhi_gap: f64 = 0.0;
            for _ in 0..5 {
                let (sigma, event) = random_probe(t, &mut r, 0.3);
                rhi_gap = rhi_gap.max(rhi_probe(t, &case.drivers, &sigma, &event, p)?.identity_gap);
            }
            let girs = if dim == 1 {
                let coef: Vec<f64> = case.drivers.d.iter().map(|x| x[(0, 0)]).collect();
                let target = random_martingale(t, &mut r);
                Some(girsanov(t, &coef, &case.drivers.m, &[target])?.audit)
            } else {
                None
            };
            let explicit_ok = !cmp.budget.feasible || (cmp.converged && cmp.y_gap <= 1e-9 && cmp.zm_gap <= 1e-9);
            let ok = inverse_defect <= 1e-10 && recursion_defect <= 1e-10 && rhi_gap <= 1e-10 && explicit_ok && girs.map_or(true, |g| g <= 1e-12);
            let data = serde_json::json!({
                "seed": s,
                "inverse_defect": inverse_defect,
                "recursion_defect": recursion_defect,
                "inverse_sde_gap": sde_gap,
                "reverse_holder": bundle::to_value(rh),
                "continuation": scan,
                "explicit_vs_picard": cmp,
                "rhi_identity_gap": rhi_gap,
                "girsanov_audit": girs,
            });
            let row = vec![i.to_string(), s.to_string(), num(inverse_defect), num(recursion_defect), num(rh), num(cmp.y_gap), num(cmp.zm_gap), num(rhi_gap), opt(girs), ok.to_string()];
            Ok((data, row, ok))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut b = Bundle::default();
    let mut rows = Vec::new();
    for (i, (data, row, ok)) in per.into_iter().enumerate() {
        b.push(
            TypedReport::new("linear", format!("case#{i}"), Backend::Tree, "defects are max-entry gaps; reverse_holder = sup_v E[|S(T)S(v)^-1|^p | v]; y/zm gaps compare the explicit and the Picard BSDE solutions", data)
                .p(p)
                .check(ok),
        );
        rows.push(row);
    }
    b.table("linear.csv", &["id", "seed", "inverse_defect", "recursion_defect", "reverse_holder", "y_gap", "zm_gap", "rhi_identity_gap", "girsanov_audit", "passed"], rows);
    Ok(b)
}

pub fn spectral(a: &SpectralArgs) -> CliResult<Bundle> {
    let ps = a.p.clone().unwrap_or_else(|| vec![2.0]);
    let mut b = Bundle::default();
    match a.backend.unwrap_or(BackendArg::Tree) {
        BackendArg::Tree => {
            let seed = a.seed.unwrap_or(0);
            let members = corpus_members(a.corpus.as_deref().unwrap_or(DEFAULT_CORPUS), seed)?;
            let per = members
                .par_iter()
                .map(|m| -> CliResult<_> {
                    let opm = operator_matrix(&m.tree, &m.martingale);
                    let radii = ps.iter().map(|&p| spectral_radius_tree(&m.tree, &opm, p, 4, m.seed)).collect::<bmolab::Result<Vec<_>>>()?;
                    let eq = tree_equivalence(&m.tree, &m.martingale)?;
                    Ok((m.id, m.tree.depth(), radii, eq))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let mut rows = Vec::new();
            for (id, depth, radii, eq) in per {
                let ok = eq.holds && radii.iter().all(|r| r.radius == 0.0) && eq.nilpotency_index.map_or(false, |k| k <= depth + 1);
                for r in &radii {
                    rows.push(vec![id.to_string(), depth.to_string(), num(r.p), num(r.radius), eq.nilpotency_index.map(|k| k.to_string()).unwrap_or_default(), eq.holds.to_string()]);
                }
                b.push(
                    TypedReport::new("spectral-tree", format!("member#{id}"), Backend::Tree, "radius = lim ‖φⁿ‖^{1/n} of X ↦ X∘M on H^p; exact at p = 2", serde_json::json!({ "radii": radii, "equivalence": eq }))
                        .check(ok),
                );
            }
            b.table("spectral.csv", &["corpus_id", "depth", "p", "radius", "nilpotency_index", "equivalence"], rows);
        }
        BackendArg::Mc => {
            let seed = need_seed(a.seed)?;
            let ens = scenario(a.scenario.as_deref().unwrap_or("stopped-time-change"), a.k.unwrap_or(10), a.paths.unwrap_or(20_000), seed)?;
            let cfg = SpectralMcConfig { n_max: a.n_max.unwrap_or(8), ..Default::default() };
            let mut rows = Vec::new();
            for &p in &ps {
                let r = spectral_radius_mc(&ens, p, &cfg, a.b_hat)?;
                let check = r.window.filter(|w| w.1 > 0.0).map(|w| r.r_hat <= w.1 * 1.10);
                rows.push(vec![num(p), num(r.r_hat), num(r.r_first), r.n_used.to_string(), opt(r.window.map(|w| w.0)), opt(r.window.map(|w| w.1))]);
                let mut t = TypedReport::new("spectral-mc", format!("r_hat[p={p}]"), Backend::Mc, "r_hat = max over probes of (‖φⁿX‖_{H^p}/‖X‖_{H^p})^{1/n} at the largest reliable n; window = [√p/b, √(2p(2p−1))/b]", &r).p(p);
                t.passed = check;
                b.push(t);
            }
            b.table("spectral.csv", &["p", "r_hat", "r_first", "n_used", "window_lo", "window_hi"], rows);
        }
    }
    Ok(b)
}

fn parse_clock(s: &str) -> CliResult<Clock> {
    if s == "calendar" {
        return Ok(Clock::Calendar);
    }
    s.strip_prefix("bracket:")
        .and_then(|x| x.parse().ok())
        .map(|step_log2| Clock::Bracket { step_log2 })
        .ok_or_else(|| usage(format!("clock '{s}': expected calendar or bracket:<int>")))
}

pub fn counterexample(a: &CounterexampleArgs) -> CliResult<Bundle> {
    let seed = need_seed(a.seed)?;
    let k = a.k.unwrap_or(10);
    let clock = parse_clock(a.clock.as_deref().unwrap_or("calendar"))?;
    let lambdas = a.lambdas.clone().unwrap_or_else(|| vec![0.0, 1.0, 2.0, 5.0, 12.0]);
    let sc = build_scenario_in(k, a.paths.unwrap_or(100_000), seed, clock)?;
    let scan = moment_blowup_scan(&sc, &lambdas, a.groups.unwrap_or(16), a.factor.unwrap_or(1.5))?;
    let mut b = Bundle::default();
    b.push(TypedReport::new("counterexample-scenario", "scenario", Backend::Mc, "exit_bracket = E⟨X⟩ at the stop (raw and corrected for discrete monitoring), with standard errors", sc.summary()));
    let mut rows = Vec::new();
    for r in &scan.rows {
        let verdict = crate::bundle::to_value(r.verdict);
        rows.push(vec![num(r.lambda), num(r.estimate), num(r.se), verdict.as_str().unwrap_or_default().to_string()]);
        let mut t = TypedReport::new("moment-scan", format!("lambda={}", r.lambda), Backend::Mc, "estimate = E[exp(λ∫Z² ds)] with standard error; oracle = [sec(√(2λ)/3), sec(√(2λ))]", r);
        t.passed = match r.verdict {
            ScanVerdict::Undetermined => None,
            v => Some(v != ScanVerdict::Failed),
        };
        b.push(t);
    }
    b.push(TypedReport::new("moment-scan-summary", "crossover", Backend::Mc, "smallest scanned λ flagged divergent; not a claim about the true threshold", serde_json::json!({ "empirical_crossover": scan.empirical_crossover, "unstopped_fraction": scan.unstopped_fraction })));
    if let Some(ladder) = &a.ladder {
        let n = a.ladder_paths.unwrap_or(20_000);
        let levels = ladder.iter().map(|&kk| build_scenario(kk, n, seed)).collect::<bmolab::Result<Vec<_>>>()?;
        let refs: Vec<_> = levels.iter().collect();
        let v = verify_solution(&refs, 0.4)?;
        let ok = v.passes;
        b.push(TypedReport::new("counterexample-residual", "refinement", Backend::Mc, "order = slope of log E|Σ residual| against log Δt", v).check(ok));
    }
    b.table("blowup.csv", &["lambda", "estimate", "se", "verdict"], rows);
    Ok(b)
}

pub fn exponent(a: &ExponentArgs) -> CliResult<Bundle> {
    let seed = need_seed(a.seed)?;
    let ens = scenario(a.scenario.as_deref().unwrap_or("stopped-time-change"), a.k.unwrap_or(10), a.paths.unwrap_or(200_000), seed)?;
    let d = ExponentConfig::default();
    let cfg = ExponentConfig { cap: a.cap.unwrap_or(d.cap), tol: a.tol.unwrap_or(d.tol), ..d };
    let which = a.which.unwrap_or(Which::B);
    let r = match which {
        Which::A => estimate_a(&ens, &cfg)?,
        Which::B => estimate_b(&ens, &cfg)?,
    };
    let mut b = Bundle::default();
    b.table("exponent.csv", &["name", "lo", "hi", "infinite"], vec![vec![format!("{which:?}").to_lowercase(), num(r.lo), opt(r.hi), r.infinite.to_string()]]);
    let mut t = TypedReport::new("exponent", format!("{which:?}").to_lowercase(), Backend::Mc, "[lo, hi] brackets the critical exponent; hi = null means +∞", &r);
    t.passed = a.expect.map(|x| r.contains(x));
    b.push(t);
    Ok(b)
}

pub fn corpus_generate(a: &GenerateArgs) -> CliResult<Bundle> {
    let mut spec = CorpusSpec::new(a.n.unwrap_or(100), a.depth.unwrap_or(4), a.branching.clone().unwrap_or_else(|| vec![2, 3]), a.seed.unwrap_or(0));
    if let Some(g) = &a.generator {
        spec.generator = parse_generator(g)?;
    }
    if spec.n == 0 || spec.depth == 0 || spec.branching.is_empty() || spec.branching.iter().any(|&b| b < 2) {
        return Err(usage("corpus needs n ≥ 1, depth ≥ 1 and branching ≥ 2"));
    }
    let members = spec.members()?;
    let docs: Vec<TreeDocument> = members.iter().map(|m| TreeDocument::from_parts(&m.tree, &m.martingale)).collect();
    let mut b = Bundle::default();
    b.extra.push(("trees.json".into(), serde_json::to_string(&docs).map_err(|e| usage(e.to_string()))?));
    let rows = members.iter().map(|m| vec![m.id.to_string(), m.seed.to_string(), m.tree.depth().to_string(), m.tree.branching().to_string(), m.tree.n_nodes().to_string()]).collect();
    b.table("corpus.csv", &["id", "seed", "depth", "branching", "nodes"], rows);
    b.push(TypedReport::new("corpus", "spec", Backend::Tree, "seeded corpus; trees.json holds the members as tree documents", &spec));
    Ok(b)
}

pub fn corpus_describe(a: &DescribeArgs) -> CliResult<Bundle> {
    let members = corpus_members(a.corpus.as_deref().unwrap_or(DEFAULT_CORPUS), a.seed.unwrap_or(0))?;
    let mut b = Bundle::default();
    let mut rows = Vec::new();
    for m in &members {
        let t = &m.tree;
        let bmo = bmo_norm(t, &m.martingale).value;
        let bracket = t.leaves().map(|l| m.martingale.bracket()[l]).fold(0.0, f64::max);
        let min_eps = min_feasible_eps(t, &m.martingale);
        rows.push(vec![m.id.to_string(), t.depth().to_string(), t.branching().to_string(), t.n_nodes().to_string(), num(bmo), num(bracket), num(min_eps)]);
        b.push(TypedReport::new(
            "corpus-member",
            format!("member#{}", m.id),
            Backend::Tree,
            "bmo = sup_v E[⟨M⟩_T − ⟨M⟩_v | v]^{1/2}; max_bracket = largest terminal ⟨M⟩; min_slice_eps = smallest feasible slice level",
            serde_json::json!({ "depth": t.depth(), "branching": t.branching(), "nodes": t.n_nodes(), "bmo": bmo, "max_bracket": bracket, "min_slice_eps": min_eps }),
        ));
    }
    b.table("describe.csv", &["id", "depth", "branching", "nodes", "bmo", "max_bracket", "min_slice_eps"], rows);
    Ok(b)
}
