//! Seeded Brownian path ensembles on uniform grids.
//!
//! An ensemble is a recipe: `(spec, grid, n_paths, seed)`. Path `i` is
//! regenerated on demand from a ChaCha8 stream selected by `i`, so results do
//! not depend on how paths are split across workers and large ensembles never
//! have to sit in memory. [`PathEnsemble::materialize`] stores every channel
//! for small ensembles and export.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::Config(format!("invalid grid [{t_start}, {t_end}] with {steps} steps")));
        }
        Ok(TimeGrid { t_start, t_end, steps })
    }

    /// [0, 1 − 2^{-k}] with step 2^{-dt_log2} (dt_log2 ≥ k).
    pub fn below_one(k: u32, dt_log2: u32) -> Result<Self> {
        if dt_log2 < k || dt_log2 > 40 {
            return Err(Error::Config(format!("need k ≤ dt_log2 ≤ 40, got k={k}, dt_log2={dt_log2}")));
        }
        let steps = (1usize << dt_log2) - (1usize << (dt_log2 - k));
        Self::new(0.0, 1.0 - 0.5f64.powi(k as i32), steps)
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integrand {
    Zero,
    Constant { value: f64 },
    /// (1 − s)^{-1/2}: the bracket runs on the clock −log(1 − s).
    TimeChange,
}

impl Integrand {
    #[inline]
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Integrand::Zero => 0.0,
            Integrand::Constant { value } => value,
            Integrand::TimeChange => 1.0 / (1.0 - t).sqrt(),
        }
    }

    fn singular_time(&self) -> Option<f64> {
        match self {
            Integrand::TimeChange => Some(1.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "level", rename_all = "snake_case")]
pub enum BarrierRule {
    AbsAbove(f64),
    Above(f64),
    Below(f64),
}

impl BarrierRule {
    #[inline]
    pub fn fires(&self, x: f64) -> bool {
        match *self {
            BarrierRule::AbsAbove(c) => x.abs() > c,
            BarrierRule::Above(c) => x > c,
            BarrierRule::Below(c) => x < c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxChannel {
    /// exp(λM − ½λ²⟨M⟩) for complex λ, stored as log-modulus and argument.
    Exponential { re: f64, im: f64 },
    /// Σ h_k²Δt/(X_k + 2)² before the stop, X the unscaled state. For the time
    /// change this is Σ Z_k²Δt with Z_k = −1/((X_k + 2)√(1 − t_k)).
    ZBracket,
}

/// Recipe for a martingale M = scale · ∫h dW, optionally frozen when the
/// unscaled integral first breaks a barrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSpec {
    pub integrand: Integrand,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub stop: Option<BarrierRule>,
    #[serde(default)]
    pub aux: Vec<AuxChannel>,
}

fn one() -> f64 {
    1.0
}

impl MartingaleSpec {
    pub fn brownian() -> Self {
        MartingaleSpec { integrand: Integrand::Constant { value: 1.0 }, scale: 1.0, stop: None, aux: vec![] }
    }

    /// ∫(1 − s)^{-1/2} dW stopped when |X| > 1.
    pub fn stopped_time_change() -> Self {
        MartingaleSpec { integrand: Integrand::TimeChange, scale: 1.0, stop: Some(BarrierRule::AbsAbove(1.0)), aux: vec![] }
    }

    pub fn with_aux(mut self, a: AuxChannel) -> Self {
        self.aux.push(a);
        self
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.scale *= c;
        self
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names = vec!["W".to_string(), "M".to_string(), "QV".to_string()];
        for (i, a) in self.aux.iter().enumerate() {
            match a {
                AuxChannel::Exponential { .. } => {
                    names.push(format!("E{i}.logmod"));
                    names.push(format!("E{i}.arg"));
                }
                AuxChannel::ZBracket => names.push(format!("Z{i}.bracket")),
            }
        }
        names
    }

    /// Deterministic bound on ⟨M⟩ in the model (not just on the grid), if any.
    pub fn bracket_bound(&self, grid: &TimeGrid) -> Option<f64> {
        match self.integrand {
            Integrand::Zero => Some(0.0),
            Integrand::Constant { value } => Some(self.scale * self.scale * value * value * (grid.t_end - grid.t_start)),
            Integrand::TimeChange => None,
        }
    }

    /// Bound on |M_T − M_τ| for continuous paths, if the stop rule gives one.
    pub fn increment_bound(&self) -> Option<f64> {
        match self.stop {
            Some(BarrierRule::AbsAbove(c)) => Some(2.0 * c * self.scale.abs()),
            _ => None,
        }
    }
}

/// How often the stop rule is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    Every,
    /// Every second grid index: the coarse companion used for bias bounds.
    Coarse,
}

impl Monitor {
    #[inline]
    fn checks(&self, k: usize) -> bool {
        match self {
            Monitor::Every => true,
            Monitor::Coarse => k % 2 == 0,
        }
    }
}

/// Per-monitor state of one path at grid index k.
#[derive(Debug, Clone, Copy, Default)]
pub struct PathState {
    /// Unscaled integral ∫h dW (frozen after the stop).
    pub x: f64,
    /// Unscaled bracket ∫h² ds, left-point.
    pub qv: f64,
    pub zsq: f64,
    /// Grid index at which the rule fired.
    pub stopped_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub spec: MartingaleSpec,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
}

impl PathEnsemble {
    pub fn new(spec: MartingaleSpec, grid: TimeGrid, n_paths: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::Empty("ensemble needs at least one path".into()));
        }
        if let Some(ts) = spec.integrand.singular_time() {
            if grid.t_end >= ts {
                return Err(Error::Config(format!("integrand is singular at t = {ts}; grid must end before it (t_end = {})", grid.t_end)));
            }
        }
        Ok(PathEnsemble { spec, grid, n_paths, seed })
    }

    pub fn path_rng(&self, i: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(i as u64);
        r
    }

    pub fn with_paths(&self, n: usize) -> Self {
        PathEnsemble { n_paths: n, ..self.clone() }
    }

    /// Scaled martingale value and bracket of a state.
    #[inline]
    pub fn m_of(&self, s: &PathState) -> f64 {
        self.spec.scale * s.x
    }
    #[inline]
    pub fn qv_of(&self, s: &PathState) -> f64 {
        self.spec.scale * self.spec.scale * s.qv
    }

    /// Walks path `i` with one state per monitor. `visit(k, w, states)` is called
    /// for k = 0..=K and may return false to end the walk early.
    pub fn walk(&self, i: usize, monitors: &[Monitor], mut visit: impl FnMut(usize, f64, &[PathState]) -> bool) {
        let mut rng = self.path_rng(i);
        let dt = self.grid.dt();
        let sdt = dt.sqrt();
        let zb = self.spec.aux.iter().any(|a| matches!(a, AuxChannel::ZBracket));
        let mut st = vec![PathState::default(); monitors.len()];
        if let Some(rule) = self.spec.stop {
            for (s, m) in st.iter_mut().zip(monitors) {
                if m.checks(0) && rule.fires(0.0) {
                    s.stopped_at = Some(0);
                }
            }
        }
        let mut w = 0.0;
        if !visit(0, w, &st) {
            return;
        }
        for k in 0..self.grid.steps {
            let z: f64 = rng.sample(StandardNormal);
            let dw = sdt * z;
            let t = self.grid.time(k);
            let h = self.spec.integrand.at(t);
            for (s, m) in st.iter_mut().zip(monitors) {
                if s.stopped_at.is_none() {
                    if zb {
                        let y = s.x + 2.0;
                        s.zsq += h * h * dt / (y * y);
                    }
                    s.x += h * dw;
                    s.qv += h * h * dt;
                    if let Some(rule) = self.spec.stop {
                        if m.checks(k + 1) && rule.fires(s.x) {
                            s.stopped_at = Some(k + 1);
                        }
                    }
                }
            }
            w += dw;
            if !visit(k + 1, w, &st) {
                return;
            }
        }
    }

    /// Channel values of a state, in [`MartingaleSpec::channel_names`] order.
    pub fn channels_of(&self, w: f64, s: &PathState, out: &mut Vec<f64>) {
        out.clear();
        let m = self.m_of(s);
        let q = self.qv_of(s);
        out.push(w);
        out.push(m);
        out.push(q);
        for a in &self.spec.aux {
            match *a {
                AuxChannel::Exponential { re, im } => {
                    let (l2re, l2im) = (re * re - im * im, 2.0 * re * im);
                    out.push(re * m - 0.5 * l2re * q);
                    out.push(im * m - 0.5 * l2im * q);
                }
                AuxChannel::ZBracket => out.push(s.zsq),
            }
        }
    }

    /// Stores all channels of all paths (n_paths × (K+1) each).
    pub fn materialize(&self) -> Materialized {
        let names = self.spec.channel_names();
        let width = self.grid.steps + 1;
        let rows: Vec<(Vec<Vec<f64>>, Option<usize>)> = (0..self.n_paths)
            .into_par_iter()
            .map(|i| {
                let mut cols = vec![Vec::with_capacity(width); names.len()];
                let mut buf = Vec::new();
                let mut stop = None;
                self.walk(i, &[Monitor::Every], |_, w, s| {
                    self.channels_of(w, &s[0], &mut buf);
                    for (c, v) in cols.iter_mut().zip(&buf) {
                        c.push(*v);
                    }
                    stop = s[0].stopped_at;
                    true
                });
                (cols, stop)
            })
            .collect();
        let mut channels: Vec<(String, Vec<f64>)> = names.into_iter().map(|n| (n, Vec::with_capacity(width * self.n_paths))).collect();
        let mut stops = Vec::with_capacity(self.n_paths);
        for (cols, stop) in rows {
            for (ch, col) in channels.iter_mut().zip(cols) {
                ch.1.extend(col);
            }
            stops.push(stop);
        }
        Materialized { n_paths: self.n_paths, grid: self.grid, channels, stop_index: GridStoppingTime { index: stops } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStoppingTime {
    /// First grid index where the rule fired; `None` is the not-stopped sentinel.
    pub index: Vec<Option<usize>>,
}

impl GridStoppingTime {
    pub fn fraction_stopped(&self) -> f64 {
        self.index.iter().filter(|x| x.is_some()).count() as f64 / self.index.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub n_paths: usize,
    pub grid: TimeGrid,
    /// Row-major n_paths × (K+1) arrays.
    pub channels: Vec<(String, Vec<f64>)>,
    pub stop_index: GridStoppingTime,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BinaryHeader {
    pub n_paths: usize,
    pub steps: usize,
    pub channels: Vec<String>,
    pub dtype: String,
    pub layout: String,
}

impl Materialized {
    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.channels.iter().find(|c| c.0 == name).map(|c| c.1.as_slice()).ok_or_else(|| Error::MissingChannel(name.into()))
    }

    pub fn width(&self) -> usize {
        self.grid.steps + 1
    }

    pub fn row<'a>(&self, data: &'a [f64], path: usize) -> &'a [f64] {
        let w = self.width();
        &data[path * w..(path + 1) * w]
    }

    /// Flat little-endian f64 array (channel-major, then path, then time) and its JSON header.
    pub fn write_binary(&self, data: &mut impl Write) -> Result<BinaryHeader> {
        for (_, v) in &self.channels {
            for x in v {
                data.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(BinaryHeader {
            n_paths: self.n_paths,
            steps: self.grid.steps,
            channels: self.channels.iter().map(|c| c.0.clone()).collect(),
            dtype: "f64-le".into(),
            layout: "channel, path, time".into(),
        })
    }

    /// One CSV row per diagnostic: channel terminal mean and standard error.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("diagnostic,value,se\n");
        for (name, v) in &self.channels {
            let term: Vec<f64> = (0..self.n_paths).map(|i| self.row(v, i)[self.grid.steps]).collect();
            let (m, se) = mean_se(&term);
            s.push_str(&format!("terminal_mean[{name}],{m},{se}\n"));
        }
        s.push_str(&format!("fraction_stopped,{},\n", self.stop_index.fraction_stopped()));
        s
    }
}

/// First grid index where `rule` fires on the named channel.
pub fn hit_time(ens: &Materialized, channel: &str, rule: BarrierRule) -> Result<GridStoppingTime> {
    let data = ens.channel(channel)?;
    let index = (0..ens.n_paths).map(|i| ens.row(data, i).iter().position(|&x| rule.fires(x))).collect();
    Ok(GridStoppingTime { index })
}

pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Equal-width bins over the observed state range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovStateBinner {
    pub n_bins: usize,
    pub min_count: usize,
}

impl Default for MarkovStateBinner {
    fn default() -> Self {
        MarkovStateBinner { n_bins: 16, min_count: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEstimate {
    pub lo: f64,
    pub hi: f64,
    /// Mean state of the members.
    pub state_mean: f64,
    pub mean: f64,
    pub se: f64,
    pub count: usize,
    pub usable: bool,
}

/// Per-bin conditional means of `targets` given `states`.
pub fn conditional_estimate(states: &[f64], targets: &[f64], binner: &MarkovStateBinner) -> Result<Vec<BinEstimate>> {
    if states.is_empty() {
        return Err(Error::Empty("no samples to bin".into()));
    }
    if states.len() != targets.len() {
        return Err(Error::Dimension { expected: states.len(), got: targets.len() });
    }
    let lo = states.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = states.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let nb = if hi > lo { binner.n_bins.max(1) } else { 1 };
    let width = (hi - lo) / nb as f64;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (i, &s) in states.iter().enumerate() {
        let b = if nb == 1 { 0 } else { (((s - lo) / width) as usize).min(nb - 1) };
        members[b].push(i);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(b, idx)| {
            let t: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            let (mean, se) = mean_se(&t);
            let state_mean = idx.iter().map(|&i| states[i]).sum::<f64>() / idx.len().max(1) as f64;
            BinEstimate {
                lo: lo + b as f64 * width,
                hi: if nb == 1 { hi } else { lo + (b + 1) as f64 * width },
                state_mean,
                mean,
                se,
                count: idx.len(),
                usable: idx.len() >= binner.min_count,
            }
        })
        .collect())
}

/// Probe stopping times for sup-over-τ estimates: deterministic grid indices
/// and first hitting times of |X| at fixed levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFamily {
    pub times: Vec<usize>,
    pub levels: Vec<f64>,
}

impl ProbeFamily {
    pub fn len(&self) -> usize {
        self.times.len() + self.levels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n_times` evenly spaced record times (the horizon excluded) plus hitting
    /// levels at the i/(n_levels+1) quantiles of |X| over a pilot of the ensemble.
    pub fn standard(ens: &PathEnsemble, n_times: usize, n_levels: usize) -> Self {
        let k = ens.grid.steps;
        let n_times = n_times.clamp(1, k);
        let mut times: Vec<usize> = (0..n_times).map(|j| j * k / n_times).collect();
        times.dedup();
        let mut levels = Vec::new();
        if n_levels > 0 && ens.spec.stop.is_some() {
            let pilot = ens.n_paths.min(512);
            let stride = (k / 64).max(1);
            let mut xs = Vec::new();
            for i in 0..pilot {
                ens.walk(i, &[Monitor::Every], |j, _, s| {
                    if j % stride == 0 {
                        xs.push(s[0].x.abs());
                    }
                    s[0].stopped_at.is_none()
                });
            }
            xs.sort_by(f64::total_cmp);
            for q in 1..=n_levels {
                let idx = (q * xs.len() / (n_levels + 1)).min(xs.len() - 1);
                let level = xs[idx];
                if level > 0.0 && !levels.contains(&level) {
                    levels.push(level);
                }
            }
        }
        ProbeFamily { times, levels }
    }

    pub fn describe(&self) -> String {
        format!("{} deterministic grid times and first hitting times of |X| at levels {:?}", self.times.len(), self.levels)
    }
}

/// Which channel the probes record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeChannel {
    Value,
    Bracket,
    /// log-modulus of the i-th auxiliary exponential
    LogModulus(usize),
    ZBracket,
}

/// Channel values of every path at every probe, for one monitoring mode.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub n_paths: usize,
    pub n_probes: usize,
    /// Markov state (scaled M) at the probe; NaN when the probe never fired.
    pub state: Vec<f32>,
    /// Channel value at the probe; NaN when the probe never fired.
    pub value: Vec<f32>,
    pub terminal: Vec<f64>,
    /// The stop rule never fired before the grid ended.
    pub truncated: Vec<bool>,
}

impl ProbeData {
    #[inline]
    pub fn at(&self, path: usize, probe: usize) -> Option<(f64, f64)> {
        let v = self.value[path * self.n_probes + probe];
        if v.is_nan() {
            None
        } else {
            Some((self.state[path * self.n_probes + probe] as f64, v as f64))
        }
    }
}

fn channel_value(ens: &PathEnsemble, ch: ProbeChannel, s: &PathState) -> f64 {
    match ch {
        ProbeChannel::Value => ens.m_of(s),
        ProbeChannel::Bracket => ens.qv_of(s),
        ProbeChannel::ZBracket => s.zsq,
        ProbeChannel::LogModulus(i) => match ens.spec.aux.get(i) {
            Some(AuxChannel::Exponential { re, im }) => re * ens.m_of(s) - 0.5 * (re * re - im * im) * ens.qv_of(s),
            _ => f64::NAN,
        },
    }
}

/// One pass over the ensemble recording `channel` at every probe, per monitor.
pub fn collect_probes(ens: &PathEnsemble, family: &ProbeFamily, channel: ProbeChannel, monitors: &[Monitor]) -> Result<Vec<ProbeData>> {
    if let ProbeChannel::LogModulus(i) = channel {
        if !matches!(ens.spec.aux.get(i), Some(AuxChannel::Exponential { .. })) {
            return Err(Error::MissingChannel(format!("exponential aux channel {i}")));
        }
    }
    let np = family.len();
    let nt = family.times.len();
    let nm = monitors.len();
    let needs_w_free = ens.spec.stop.is_some();
    let per_path: Vec<Vec<(Vec<f32>, Vec<f32>, f64, bool)>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut out: Vec<(Vec<f32>, Vec<f32>, f64, bool)> = (0..nm).map(|_| (vec![f32::NAN; np], vec![f32::NAN; np], 0.0, true)).collect();
            let mut next_time = vec![0usize; nm];
            ens.walk(i, monitors, |k, _, states| {
                let mut all_stopped = true;
                for (mi, s) in states.iter().enumerate() {
                    let o = &mut out[mi];
                    let val = channel_value(ens, channel, s);
                    let m = ens.m_of(s);
                    while next_time[mi] < nt && family.times[next_time[mi]] == k {
                        o.0[next_time[mi]] = m as f32;
                        o.1[next_time[mi]] = val as f32;
                        next_time[mi] += 1;
                    }
                    let checks = s.stopped_at.is_none() || s.stopped_at == Some(k);
                    if checks && (monitors[mi] == Monitor::Every || k % 2 == 0) {
                        for (j, &lvl) in family.levels.iter().enumerate() {
                            if o.1[nt + j].is_nan() && s.x.abs() >= lvl {
                                o.0[nt + j] = m as f32;
                                o.1[nt + j] = val as f32;
                            }
                        }
                    }
                    o.2 = val;
                    o.3 = s.stopped_at.is_none();
                    if s.stopped_at.is_none() {
                        all_stopped = false;
                    }
                }
                // once every monitor has stopped nothing but W moves; finish the deterministic probes and exit
                if needs_w_free && all_stopped {
                    for (mi, s) in states.iter().enumerate() {
                        let o = &mut out[mi];
                        let val = channel_value(ens, channel, s);
                        let m = ens.m_of(s);
                        while next_time[mi] < nt {
                            o.0[next_time[mi]] = m as f32;
                            o.1[next_time[mi]] = val as f32;
                            next_time[mi] += 1;
                        }
                    }
                    return false;
                }
                true
            });
            out
        })
        .collect();
    let mut res: Vec<ProbeData> = (0..nm)
        .map(|_| ProbeData {
            n_paths: ens.n_paths,
            n_probes: np,
            state: Vec::with_capacity(ens.n_paths * np),
            value: Vec::with_capacity(ens.n_paths * np),
            terminal: Vec::with_capacity(ens.n_paths),
            truncated: Vec::with_capacity(ens.n_paths),
        })
        .collect();
    for path in per_path {
        for (mi, (s, v, t, tr)) in path.into_iter().enumerate() {
            res[mi].state.extend(s);
            res[mi].value.extend(v);
            res[mi].terminal.push(t);
            res[mi].truncated.push(tr && ens.spec.stop.is_some());
        }
    }
    Ok(res)
}

/// Best bin over the probe family, chosen by the lower confidence bound mean − 2·se.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupEstimate {
    pub mean: f64,
    pub se: f64,
    pub probe: usize,
    pub bin: (f64, f64),
    pub count: usize,
    /// Largest raw bin mean, for reference (biased upward).
    pub max_mean: f64,
}

pub fn sup_over_probes(data: &ProbeData, binner: &MarkovStateBinner, stat: impl Fn(f64, f64) -> f64) -> Result<SupEstimate> {
    let mut best: Option<(f64, SupEstimate)> = None;
    let mut max_mean = f64::NEG_INFINITY;
    for j in 0..data.n_probes {
        let mut states = Vec::new();
        let mut targets = Vec::new();
        for i in 0..data.n_paths {
            if let Some((s, v)) = data.at(i, j) {
                states.push(s);
                targets.push(stat(data.terminal[i], v));
            }
        }
        if states.is_empty() {
            continue;
        }
        for b in conditional_estimate(&states, &targets, binner)? {
            if !b.usable {
                continue;
            }
            max_mean = max_mean.max(b.mean);
            let lcb = b.mean - 2.0 * b.se;
            if best.as_ref().map_or(true, |(l, _)| lcb > *l) {
                best = Some((lcb, SupEstimate { mean: b.mean, se: b.se, probe: j, bin: (b.lo, b.hi), count: b.count, max_mean: 0.0 }));
            }
        }
    }
    let (_, mut est) = best.ok_or_else(|| Error::Empty("no probe bin reached the minimum count".into()))?;
    est.max_mean = max_mean;
    Ok(est)
}

/// ‖M‖_{R^p} and ‖M‖_{H^p} from one streaming pass: (value, se of the p-th moment).
pub fn norms_rp_hp_mc(ens: &PathEnsemble, p: f64) -> Result<((f64, f64), (f64, f64))> {
    crate::bmo::check_p(p)?;
    let per: Vec<(f64, f64)> = (0..ens.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut run: f64 = 0.0;
            let mut qv = 0.0;
            ens.walk(i, &[Monitor::Every], |_, _, s| {
                run = run.max(ens.m_of(&s[0]).abs());
                qv = ens.qv_of(&s[0]);
                s[0].stopped_at.is_none()
            });
            (run.powf(p), qv.powf(p / 2.0))
        })
        .collect();
    let r: Vec<f64> = per.iter().map(|x| x.0).collect();
    let h: Vec<f64> = per.iter().map(|x| x.1).collect();
    let (mr, sr) = mean_se(&r);
    let (mh, sh) = mean_se(&h);
    Ok(((mr.powf(1.0 / p), sr), (mh.powf(1.0 / p), sh)))
}

/// Certified lower bound of the BMO norm: sup over probes and state bins of the
/// conditional remaining bracket, square-rooted. Returns (value, standard error).
pub fn bmo_norm_mc(ens: &PathEnsemble, family: &ProbeFamily, binner: &MarkovStateBinner) -> Result<(f64, f64, SupEstimate)> {
    let data = collect_probes(ens, family, ProbeChannel::Bracket, &[Monitor::Every])?.remove(0);
    let est = sup_over_probes(&data, binner, |term, at| (term - at).max(0.0))?;
    let v = est.mean.max(0.0).sqrt();
    let se = if v > 0.0 { est.se / (2.0 * v) } else { est.se.sqrt() };
    Ok((v, se, est))
}

/// Lower bound of sup_τ E[(L_T/L_τ)^p | F_τ] for L the `aux`-th exponential channel.
pub fn reverse_holder_mc(ens: &PathEnsemble, aux: usize, p: f64, family: &ProbeFamily, binner: &MarkovStateBinner) -> Result<SupEstimate> {
    crate::bmo::check_p(p)?;
    let data = collect_probes(ens, family, ProbeChannel::LogModulus(aux), &[Monitor::Every])?.remove(0);
    sup_over_probes(&data, binner, |term, at| (p * (term - at)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_below_one_is_exact() {
        let g = TimeGrid::below_one(10, 12).unwrap();
        assert_eq!(g.steps, 4096 - 4);
        assert_eq!(g.dt(), 0.5f64.powi(12));
        assert!(TimeGrid::below_one(10, 8).is_err());
    }

    #[test]
    fn singular_grid_rejected() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert!(matches!(PathEnsemble::new(MartingaleSpec::stopped_time_change(), g, 10, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_integrand_gives_zero_channels() {
        let spec = MartingaleSpec { integrand: Integrand::Zero, scale: 1.0, stop: None, aux: vec![] };
        let e = PathEnsemble::new(spec, TimeGrid::new(0.0, 1.0, 16).unwrap(), 8, 3).unwrap().materialize();
        assert!(e.channel("M").unwrap().iter().all(|&x| x == 0.0));
        assert!(e.channel("QV").unwrap().iter().all(|&x| x == 0.0));
        assert!(e.channel("nope").is_err());
    }

    #[test]
    fn deterministic_and_worker_independent() {
        let e = PathEnsemble::new(MartingaleSpec::brownian(), TimeGrid::new(0.0, 1.0, 32).unwrap(), 40, 9).unwrap();
        let a = e.materialize();
        let b = e.materialize();
        assert_eq!(a, b);
        // a single path regenerated alone equals its row in the full run
        let one = e.with_paths(40).materialize();
        assert_eq!(a.row(a.channel("W").unwrap(), 17), one.row(one.channel("W").unwrap(), 17));
    }

    #[test]
    fn increments_are_standard_normal() {
        let g = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let e = PathEnsemble::new(MartingaleSpec::brownian(), g, 2000, 5).unwrap().materialize();
        let w = e.channel("W").unwrap();
        let mut inc = Vec::new();
        for i in 0..e.n_paths {
            let r = e.row(w, i);
            assert_eq!(r[0], 0.0);
            inc.extend(r.windows(2).map(|x| x[1] - x[0]));
        }
        let (m, se) = mean_se(&inc);
        assert!(m.abs() < 5.0 * se);
        let sq: Vec<f64> = inc.iter().map(|x| x * x).collect();
        let (v, sev) = mean_se(&sq);
        assert!((v - g.dt()).abs() < 5.0 * sev);
    }

    #[test]
    fn hit_time_rules() {
        let e = PathEnsemble::new(MartingaleSpec::brownian(), TimeGrid::new(0.0, 1.0, 64).unwrap(), 50, 2).unwrap().materialize();
        let st = hit_time(&e, "W", BarrierRule::AbsAbove(0.0)).unwrap();
        assert!(st.index.iter().all(|&k| k == Some(1)));
        let never = hit_time(&e, "W", BarrierRule::AbsAbove(1e6)).unwrap();
        assert_eq!(never.fraction_stopped(), 0.0);
    }

    #[test]
    fn binner_flags_small_bins() {
        let states: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let targets = vec![1.0; 100];
        let b = conditional_estimate(&states, &targets, &MarkovStateBinner { n_bins: 4, min_count: 30 }).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|x| x.count == 25 && !x.usable && x.mean == 1.0));
        assert!(conditional_estimate(&[], &[], &MarkovStateBinner::default()).is_err());
    }
}
