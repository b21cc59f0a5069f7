//! Explicit solution of the quadratic equation dY = Z dW + ½Z² dt with
//! Y = −log(X + 2), X = ∫(1 − s)^{-1/2} dW stopped when |X| > 1, and the
//! exponential moments of ∫Z² that blow up although Z∘W is BMO.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponent::{doubling_diagnostic, DoublingDiagnostic};
use crate::mc::{mean_se, AuxChannel, BarrierRule, Integrand, MarkovStateBinner, MartingaleSpec, Monitor, PathEnsemble, ProbeChannel, ProbeFamily, TimeGrid};

/// Below this λ the moment is finite and bracketed by the exit-time oracle.
pub const FINITE_BELOW: f64 = PI * PI / 8.0;
/// From here on the moment is infinite.
pub const DIVERGENT_FROM: f64 = 9.0 * PI * PI / 8.0;

/// Per-path record of the explicit solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    /// Grid index of the first |X| > 1; None when the grid ended first.
    pub stop_index: Option<usize>,
    pub x_tau: f64,
    /// ⟨X⟩ at the stop (or at the grid end).
    pub bracket_tau: f64,
    /// Same, with the stop rule checked on every second index only.
    pub bracket_tau_coarse: f64,
    /// ∫Z² ds from the ensemble channel.
    pub z_bracket: f64,
    /// ∫Z² ds accumulated from Z itself.
    pub z_bracket_direct: f64,
    /// ξ = Y_τ
    pub y_tau: f64,
    /// Σ_k (Y_{k+1} − Y_k − Z_kΔW_k − ½Z_k²Δt) over the active steps.
    pub residual: f64,
    pub first_residual: f64,
    /// Residual on the step right after the stop.
    pub post_stop_residual: f64,
    /// max_k | |Z_k|·√(1 − t_k)·(X_k + 2) − 1 |
    pub z_identity_gap: f64,
    /// |X_τ| − 1, zero when not stopped.
    pub overshoot: f64,
    /// The overshoot reached X + 2 ≤ 0, where Y is undefined.
    pub singular: bool,
}

/// How the interval [0, 1 − 2^{-k}] is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "clock", rename_all = "kebab-case")]
pub enum Clock {
    /// Uniform in t with Δt = 2^{-(k+2)}.
    Calendar,
    /// Uniform in the bracket clock u = −log(1 − t), Δu ≈ 2^{-step_log2}; the
    /// cost per path no longer grows with k.
    Bracket { step_log2: u32 },
}

#[derive(Debug, Clone)]
pub struct CounterexampleScenario {
    pub k: u32,
    pub clock: Clock,
    pub delta: f64,
    pub ensemble: PathEnsemble,
    pub y0: f64,
    pub paths: Vec<PathSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub k: u32,
    pub clock: Clock,
    pub delta: f64,
    pub dt: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub y0: f64,
    pub stopped_fraction: f64,
    pub max_overshoot: f64,
    pub y_range: (f64, f64),
    /// E⟨X⟩_τ as monitored, with its standard error.
    pub exit_bracket: (f64, f64),
    /// Same, corrected for discrete monitoring with the coarse companion.
    pub exit_bracket_corrected: (f64, f64),
    pub max_z_identity_gap: f64,
    pub max_z_bracket_gap: f64,
    pub singular_paths: usize,
}

pub fn build_scenario(k: u32, n_paths: usize, seed: u64) -> Result<CounterexampleScenario> {
    build_scenario_in(k, n_paths, seed, Clock::Calendar)
}

pub fn build_scenario_in(k: u32, n_paths: usize, seed: u64, clock: Clock) -> Result<CounterexampleScenario> {
    if k < 6 {
        return Err(Error::Config(format!("k = {k}: need k >= 6")));
    }
    let ens = match clock {
        Clock::Calendar => {
            let spec = MartingaleSpec::stopped_time_change().with_aux(AuxChannel::ZBracket);
            PathEnsemble::new(spec, TimeGrid::below_one(k, k + 2)?, n_paths, seed)?
        }
        Clock::Bracket { step_log2 } => {
            // X is a Brownian motion on this clock
            let spec = MartingaleSpec { integrand: Integrand::Constant { value: 1.0 }, scale: 1.0, stop: Some(BarrierRule::AbsAbove(1.0)), aux: vec![AuxChannel::ZBracket] };
            let end = k as f64 * std::f64::consts::LN_2;
            let steps = (end * 2.0f64.powi(step_log2 as i32)).ceil() as usize;
            PathEnsemble::new(spec, TimeGrid::new(0.0, end, steps)?, n_paths, seed)?
        }
    };
    let paths: Vec<PathSummary> = (0..n_paths).into_par_iter().map(|i| summarize(&ens, clock, i)).collect();
    Ok(CounterexampleScenario { k, clock, delta: 0.5f64.powi(k as i32), y0: -(2.0f64).ln(), ensemble: ens, paths })
}

fn calendar_time(clock: Clock, s: f64) -> f64 {
    match clock {
        Clock::Calendar => s,
        Clock::Bracket { .. } => -(-s).exp_m1(),
    }
}

// The residual is written with X and ⟨X⟩: Z ΔW = Z̃ ΔX and Z² Δt = Z̃² Δ⟨X⟩ with
// Z̃ = Z√(1 − t) = −1/(X + 2), which holds on either clock.
fn summarize(ens: &PathEnsemble, clock: Clock, i: usize) -> PathSummary {
    let grid = ens.grid;
    let mut s = PathSummary {
        stop_index: None,
        x_tau: 0.0,
        bracket_tau: 0.0,
        bracket_tau_coarse: 0.0,
        z_bracket: 0.0,
        z_bracket_direct: 0.0,
        y_tau: -(2.0f64).ln(),
        residual: 0.0,
        first_residual: 0.0,
        post_stop_residual: 0.0,
        z_identity_gap: 0.0,
        overshoot: 0.0,
        singular: false,
    };
    // state before the current step
    let (mut x, mut qv, mut active) = (0.0f64, 0.0f64, true);
    let mut coarse_done = false;
    ens.walk(i, &[Monitor::Every, Monitor::Coarse], |k, _, st| {
        let (fine, coarse) = (&st[0], &st[1]);
        if k > 0 {
            if fine.x + 2.0 <= 0.0 {
                s.singular = true;
            }
            let y_prev = -(x + 2.0).ln();
            let y_next = -(fine.x + 2.0).ln();
            if active {
                let t = calendar_time(clock, grid.time(k - 1));
                let z = -1.0 / ((x + 2.0) * (1.0 - t).sqrt());
                s.z_identity_gap = s.z_identity_gap.max((z.abs() * (1.0 - t).sqrt() * (x + 2.0) - 1.0).abs());
                let zt = -1.0 / (x + 2.0);
                let dq = fine.qv - qv;
                s.z_bracket_direct += zt * zt * dq;
                let r = y_next - y_prev - zt * (fine.x - x) - 0.5 * zt * zt * dq;
                s.residual += r;
                if k == 1 {
                    s.first_residual = r;
                }
            } else {
                s.post_stop_residual = y_next - y_prev;
            }
        }
        if !coarse_done && (coarse.stopped_at.is_some() || k == grid.steps) {
            s.bracket_tau_coarse = coarse.qv;
            coarse_done = true;
        }
        let was_active = active;
        x = fine.x;
        qv = fine.qv;
        active = fine.stopped_at.is_none();
        if was_active && (!active || k == grid.steps) {
            s.stop_index = fine.stopped_at;
            s.x_tau = fine.x;
            s.bracket_tau = fine.qv;
            s.z_bracket = fine.zsq;
            s.y_tau = -(fine.x + 2.0).ln();
            s.overshoot = if active { 0.0 } else { fine.x.abs() - 1.0 };
        }
        // one step past the stop shows the frozen state; the coarse monitor may lag
        !(fine.stopped_at.map_or(false, |j| k > j) && coarse_done)
    });
    s
}

impl CounterexampleScenario {
    /// The first `n` paths: the same scenario at a smaller path count.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.paths.len());
        CounterexampleScenario { k: self.k, clock: self.clock, delta: self.delta, y0: self.y0, ensemble: self.ensemble.with_paths(n), paths: self.paths[..n].to_vec() }
    }

    pub fn stopped_fraction(&self) -> f64 {
        self.paths.iter().filter(|p| p.stop_index.is_some()).count() as f64 / self.paths.len() as f64
    }

    /// E⟨X⟩_τ as monitored and corrected for the √Δ monitoring bias, each with its standard error.
    pub fn exit_bracket(&self) -> ((f64, f64), (f64, f64)) {
        let raw: Vec<f64> = self.paths.iter().map(|p| p.bracket_tau).collect();
        let c = 1.0 / (2.0f64.sqrt() - 1.0);
        let cor: Vec<f64> = self.paths.iter().map(|p| p.bracket_tau + c * (p.bracket_tau - p.bracket_tau_coarse)).collect();
        (mean_se(&raw), mean_se(&cor))
    }

    pub fn summary(&self) -> ScenarioSummary {
        let (raw, cor) = self.exit_bracket();
        let ys = self.paths.iter().filter(|p| !p.singular).map(|p| p.y_tau);
        ScenarioSummary {
            k: self.k,
            clock: self.clock,
            delta: self.delta,
            dt: self.ensemble.grid.dt(),
            steps: self.ensemble.grid.steps,
            n_paths: self.ensemble.n_paths,
            seed: self.ensemble.seed,
            y0: self.y0,
            stopped_fraction: self.stopped_fraction(),
            max_overshoot: self.paths.iter().map(|p| p.overshoot).fold(0.0, f64::max),
            y_range: ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y))),
            exit_bracket: raw,
            exit_bracket_corrected: cor,
            max_z_identity_gap: self.paths.iter().map(|p| p.z_identity_gap).fold(0.0, f64::max),
            max_z_bracket_gap: self.paths.iter().map(|p| (p.z_bracket - p.z_bracket_direct).abs()).fold(0.0, f64::max),
            singular_paths: self.paths.iter().filter(|p| p.singular).count(),
        }
    }

    /// Certified-lower-bound BMO norm of Z∘W, on the first `n` paths.
    pub fn z_bmo(&self, n: usize) -> Result<(f64, f64)> {
        let ens = self.ensemble.with_paths(n.min(self.ensemble.n_paths));
        let family = ProbeFamily::standard(&ens, 16, 4);
        let data = crate::mc::collect_probes(&ens, &family, ProbeChannel::ZBracket, &[Monitor::Every])?.remove(0);
        let est = crate::mc::sup_over_probes(&data, &MarkovStateBinner::default(), |term, at| (term - at).max(0.0))?;
        let v = est.mean.max(0.0).sqrt();
        let se = if v > 0.0 { est.se / (2.0 * v) } else { est.se.sqrt() };
        Ok((v, se))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub k: u32,
    pub dt: f64,
    /// mean and standard error of |accumulated residual|
    pub mean_abs: (f64, f64),
    pub q99_abs: f64,
    /// mean and standard error of the first-step residual
    pub first_step: (f64, f64),
    pub max_post_stop: f64,
    pub unstopped_fraction: f64,
    /// excluded: the last step jumped past X = −2
    pub singular_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub levels: Vec<RefinementLevel>,
    /// Least-squares slope of log mean|residual| against log Δt.
    pub order: f64,
    pub tol_order: f64,
    pub first_step_ok: bool,
    pub post_stop_zero: bool,
    pub passes: bool,
}

/// Discrete residuals of the explicit solution over a refinement ladder.
pub fn verify_solution(levels: &[&CounterexampleScenario], tol_order: f64) -> Result<SolutionReport> {
    if levels.len() < 2 {
        return Err(Error::Config("refinement needs at least two scenarios".into()));
    }
    let rows: Vec<RefinementLevel> = levels
        .iter()
        .map(|s| {
            let ok = || s.paths.iter().filter(|p| !p.singular);
            let mut abs: Vec<f64> = ok().map(|p| p.residual.abs()).collect();
            let first: Vec<f64> = ok().map(|p| p.first_residual).collect();
            let mean_abs = mean_se(&abs);
            abs.sort_by(f64::total_cmp);
            RefinementLevel {
                k: s.k,
                dt: s.ensemble.grid.dt(),
                mean_abs,
                q99_abs: abs[(abs.len() * 99 / 100).min(abs.len() - 1)],
                first_step: mean_se(&first),
                max_post_stop: ok().map(|p| p.post_stop_residual.abs()).fold(0.0, f64::max),
                singular_paths: s.paths.len() - abs.len(),
                unstopped_fraction: 1.0 - s.stopped_fraction(),
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.dt.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_abs.0.ln()).collect();
    let order = slope(&xs, &ys);
    let first_step_ok = rows.iter().all(|r| r.first_step.0.abs() <= 3.0 * r.first_step.1);
    let post_stop_zero = rows.iter().all(|r| r.max_post_stop == 0.0);
    Ok(SolutionReport { passes: order >= tol_order && first_step_ok && post_stop_zero, levels: rows, order, tol_order, first_step_ok, post_stop_zero })
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Finite,
    Undetermined,
    Divergent,
}

impl Regime {
    pub fn of(lambda: f64) -> Self {
        if lambda < FINITE_BELOW {
            Regime::Finite
        } else if lambda >= DIVERGENT_FROM {
            Regime::Divergent
        } else {
            Regime::Undetermined
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanVerdict {
    /// inside the oracle bracket and not growing under doubling
    Finite,
    Divergent,
    /// middle regime, reported only
    Undetermined,
    /// the expected classification was not reached
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub lambda: f64,
    pub regime: Regime,
    pub estimate: f64,
    pub se: f64,
    /// [sec(√(2λ)/3), sec(√(2λ))] in the finite regime
    pub oracle: Option<(f64, f64)>,
    pub in_bracket: Option<bool>,
    pub doubling: DoublingDiagnostic,
    pub overflow: bool,
    pub verdict: ScanVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupReport {
    pub rows: Vec<ScanRow>,
    /// Smallest scanned λ whose estimate grows under doubling.
    pub empirical_crossover: Option<f64>,
    pub unstopped_fraction: f64,
}

pub fn sec(x: f64) -> f64 {
    1.0 / x.cos()
}

/// E[exp(λ∫Z²)] per λ with the doubling diagnostic (median of `groups` block means).
pub fn moment_blowup_scan(scenario: &CounterexampleScenario, lambdas: &[f64], groups: usize, factor: f64) -> Result<BlowupReport> {
    if let Some(&l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Config(format!("lambda = {l} must be finite and >= 0")));
    }
    let zb: Vec<f64> = scenario.paths.iter().map(|p| p.z_bracket).collect();
    let rows: Vec<ScanRow> = lambdas
        .par_iter()
        .map(|&lambda| {
            let vals: Vec<f64> = zb.iter().map(|&q| (lambda * q).exp()).collect();
            let overflow = vals.iter().any(|v| !v.is_finite());
            let (estimate, se) = mean_se(&vals);
            let doubling = doubling_diagnostic(&zb, lambda, groups, factor);
            let regime = Regime::of(lambda);
            let (oracle, in_bracket, verdict) = match regime {
                Regime::Finite => {
                    let r = (2.0 * lambda).sqrt();
                    let (lo, hi) = (sec(r / 3.0), sec(r));
                    let inside = estimate + 3.0 * se >= lo && estimate - 3.0 * se <= hi;
                    let v = if inside && !doubling.infinite && !overflow { ScanVerdict::Finite } else { ScanVerdict::Failed };
                    (Some((lo, hi)), Some(inside), v)
                }
                Regime::Divergent => (None, None, if doubling.infinite || overflow { ScanVerdict::Divergent } else { ScanVerdict::Failed }),
                Regime::Undetermined => (None, None, ScanVerdict::Undetermined),
            };
            ScanRow { lambda, regime, estimate, se, oracle, in_bracket, doubling, overflow, verdict }
        })
        .collect();
    let empirical_crossover = rows.iter().filter(|r| r.doubling.infinite || r.overflow).map(|r| r.lambda).fold(None, |a: Option<f64>, l| Some(a.map_or(l, |a| a.min(l))));
    Ok(BlowupReport { rows, empirical_crossover, unstopped_fraction: 1.0 - scenario.stopped_fraction() })
}
