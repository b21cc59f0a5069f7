//! Command-line front end: argument parsing, configuration files, scenario
//! registry and dispatch to the library. `run` returns the bundle location and
//! the names of failed checks; the binary turns that into an exit code.

pub mod bundle;
mod commands;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use bmolab::corpus::{CorpusMember, CorpusSpec, Generator};
use bmolab::mc::{MartingaleSpec, PathEnsemble, TimeGrid};
use bmolab::tree::TreeDocument;

pub use bundle::{Bundle, TypedReport};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "BMOLAB_OUT";
pub const DEFAULT_OUT: &str = "bmolab-out";

#[derive(Debug, Parser)]
#[command(name = "bmolab", version, about = "BMO martingale laboratory: exact trees, Monte Carlo, sliced solvers, spectra")]
pub struct Cli {
    /// Output directory [default: $BMOLAB_OUT, else ./bmolab-out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON file holding flag values (long names as keys); command-line flags win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Formats to emit
    #[arg(long, global = true, value_delimiter = ',')]
    pub format: Option<Vec<Format>>,
    /// Bundle directory name [default: the subcommand]
    #[arg(long, global = true)]
    pub name: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the martingale inequalities on a tree corpus
    Verify(VerifyArgs),
    /// Solve random stochastic equations with the sliced Picard solvers
    Solve(SolveArgs),
    /// Fundamental solutions, linear BSDEs, change of measure
    Linear(LinearArgs),
    /// Spectral radius of the stochastic-integral operator
    Spectral(SpectralArgs),
    /// The quadratic-BSDE counterexample
    Counterexample(CounterexampleArgs),
    /// Kazamaki exponents on the Monte Carlo backend
    Exponent(ExponentArgs),
    /// Generate or describe tree corpora
    Corpus(CorpusArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct VerifyArgs {
    /// Inequality name or "all" [default: all]
    #[arg(long)]
    pub ineq: Option<String>,
    /// seeded:{n:100,depth:4,branching:2|3} or file:<trees.json> [default: seeded:{n:100,depth:4,branching:2|3}]
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exponents for the p-dependent inequalities [default: per inequality]
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    /// Relative tolerance [default: 1e-10]
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Equation {
    Se,
    Bsde,
    BsdeBmo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guess {
    Zero,
    Forcing,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SolveArgs {
    /// Equation type [default: se]
    #[arg(long, value_enum)]
    pub equation: Option<Equation>,
    /// Number of random specs [default: 10]
    #[arg(long)]
    pub count: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub depth: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub branching: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON spec recipe; replaces the random specs
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Requested slice levels, raised to the feasibility floor where needed
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Picard stopping tolerance [default: 1e-12]
    #[arg(long)]
    pub tol: Option<f64>,
    /// [default: 500]
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// [default: forcing]
    #[arg(long, value_enum)]
    pub initial: Option<Guess>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct LinearArgs {
    /// [default: 5]
    #[arg(long)]
    pub count: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub depth: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub branching: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Size of the dM coefficient [default: 0.03]
    #[arg(long)]
    pub scale: Option<f64>,
    /// [default: 2]
    #[arg(long)]
    pub p: Option<f64>,
    /// Slice level for the Picard comparison [default: 0.035]
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Tree,
    Mc,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SpectralArgs {
    /// [default: tree]
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Tree corpus (tree backend)
    #[arg(long)]
    pub corpus: Option<String>,
    /// Monte Carlo scenario [default: stopped-time-change]
    #[arg(long)]
    pub scenario: Option<String>,
    /// [default: 20000]
    #[arg(long)]
    pub paths: Option<usize>,
    /// Grid level [default: 10]
    #[arg(long)]
    pub k: Option<u32>,
    /// Required on the Monte Carlo backend
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 2]
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    /// Exponent b used for the bound window
    #[arg(long)]
    pub b_hat: Option<f64>,
    /// Largest operator power [default: 8]
    #[arg(long)]
    pub n_max: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct CounterexampleArgs {
    /// The grid ends at 1 − 2^-k [default: 10]
    #[arg(long)]
    pub k: Option<u32>,
    /// [default: 100000]
    #[arg(long)]
    pub paths: Option<usize>,
    /// Required
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 0,1,2,5,12]
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// calendar, or bracket:<log2 steps per unit of bracket> [default: calendar]
    #[arg(long)]
    pub clock: Option<String>,
    /// Blocks in the median of means [default: 16]
    #[arg(long)]
    pub groups: Option<usize>,
    /// Growth per doubling that counts as divergence [default: 1.5]
    #[arg(long)]
    pub factor: Option<f64>,
    /// Grid levels for the residual refinement check, e.g. 8,10,12
    #[arg(long, value_delimiter = ',')]
    pub ladder: Option<Vec<u32>>,
    /// Paths per ladder level [default: 20000]
    #[arg(long)]
    pub ladder_paths: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    A,
    B,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExponentArgs {
    /// [default: b]
    #[arg(long, value_enum)]
    pub which: Option<Which>,
    /// [default: stopped-time-change]
    #[arg(long)]
    pub scenario: Option<String>,
    /// [default: 200000]
    #[arg(long)]
    pub paths: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub k: Option<u32>,
    /// Required
    #[arg(long)]
    pub seed: Option<u64>,
    /// Candidates above the cap count as +∞ [default: 10]
    #[arg(long)]
    pub cap: Option<f64>,
    /// Target bracket width [default: 0.05]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Value the bracket must contain
    #[arg(long)]
    pub expect: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[command(subcommand)]
    pub action: CorpusAction,
}

#[derive(Debug, Subcommand)]
pub enum CorpusAction {
    /// Write a seeded corpus as tree documents
    Generate(GenerateArgs),
    /// Summary statistics of a corpus
    Describe(DescribeArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenerateArgs {
    /// [default: 100]
    #[arg(long)]
    pub n: Option<usize>,
    /// Largest depth [default: 4]
    #[arg(long)]
    pub depth: Option<usize>,
    /// [default: 2,3]
    #[arg(long, value_delimiter = ',')]
    pub branching: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// uniform, coin or skewed [default: uniform]
    #[arg(long)]
    pub generator: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct DescribeArgs {
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or scenario: exit code 2.
    Usage(String),
    Core(bmolab::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) => write!(f, "usage error: {s}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<bmolab::Error> for CliError {
    fn from(e: bmolab::Error) -> Self {
        CliError::Core(e)
    }
}
impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(s: impl Into<String>) -> CliError {
    CliError::Usage(s.into())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub bundle: PathBuf,
    pub failures: Vec<String>,
    pub checks: usize,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

/// Monte Carlo scenarios by name.
pub const SCENARIOS: [(&str, &str); 3] = [
    ("stopped-time-change", "∫(1−s)^{-1/2} dW stopped when |X| > 1, grid on [0, 1 − 2^-k] with step 2^-(k+2)"),
    ("stopped-time-change-x2", "twice the stopped time change"),
    ("brownian", "Brownian motion on [0, 1] with 2^k steps"),
];

pub fn scenario(name: &str, k: u32, paths: usize, seed: u64) -> CliResult<PathEnsemble> {
    let ens = match name {
        "stopped-time-change" => PathEnsemble::new(MartingaleSpec::stopped_time_change(), TimeGrid::below_one(k, k + 2)?, paths, seed)?,
        "stopped-time-change-x2" => PathEnsemble::new(MartingaleSpec::stopped_time_change().scaled(2.0), TimeGrid::below_one(k, k + 2)?, paths, seed)?,
        "brownian" => PathEnsemble::new(MartingaleSpec::brownian(), TimeGrid::new(0.0, 1.0, 1usize << k.min(24))?, paths, seed)?,
        _ => {
            let known: Vec<&str> = SCENARIOS.iter().map(|s| s.0).collect();
            return Err(usage(format!("unknown scenario '{name}' (known: {})", known.join(", "))));
        }
    };
    Ok(ens)
}

/// Parses `seeded:{n:100,depth:4,branching:2|3,generator:coin}` or `file:<path>`.
pub fn corpus_members(src: &str, seed: u64) -> CliResult<Vec<CorpusMember>> {
    if let Some(path) = src.strip_prefix("file:") {
        let text = std::fs::read_to_string(path)?;
        let docs: Vec<TreeDocument> = serde_json::from_str(&text).map_err(|e| usage(format!("corpus file {path}: {e}")))?;
        return docs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let (tree, martingale) = d.into_parts()?;
                Ok(CorpusMember { id: i, seed: seed.wrapping_add(i as u64), tree, martingale })
            })
            .collect();
    }
    let spec = parse_seeded(src, seed)?;
    Ok(spec.members()?)
}

pub fn parse_seeded(src: &str, seed: u64) -> CliResult<CorpusSpec> {
    let body = src
        .strip_prefix("seeded:")
        .and_then(|s| s.trim().strip_prefix('{'))
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| usage(format!("corpus '{src}': expected seeded:{{n:..,depth:..,branching:..}} or file:<path>")))?;
    let mut spec = CorpusSpec::new(100, 4, vec![2, 3], seed);
    for item in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once(':').ok_or_else(|| usage(format!("corpus entry '{item}' is not key:value")))?;
        let bad = |_| usage(format!("corpus entry '{item}': bad value"));
        match k.trim() {
            "n" => spec.n = v.trim().parse().map_err(bad)?,
            "depth" => spec.depth = v.trim().parse().map_err(bad)?,
            "branching" => spec.branching = v.split('|').map(|b| b.trim().parse()).collect::<Result<_, _>>().map_err(bad)?,
            "generator" => spec.generator = v.trim().parse()?,
            other => return Err(usage(format!("unknown corpus key '{other}' (known: n, depth, branching, generator)"))),
        }
    }
    if spec.n == 0 || spec.depth == 0 || spec.branching.iter().any(|&b| b < 2) {
        return Err(usage("corpus needs n ≥ 1, depth ≥ 1 and branching ≥ 2"));
    }
    Ok(spec)
}

pub fn parse_generator(s: &str) -> CliResult<Generator> {
    Ok(s.parse()?)
}

/// Overlays the flags that were given on the config-file values.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(flags: &T, config: &serde_json::Map<String, Value>) -> CliResult<T> {
    let mut obj = config.clone();
    if let Value::Object(f) = serde_json::to_value(flags).map_err(|e| usage(e.to_string()))? {
        for (k, v) in f {
            if !v.is_null() {
                obj.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| usage(format!("config: {e}")))
}

const GLOBAL_KEYS: [&str; 3] = ["out", "format", "name"];

fn load_config(path: Option<&Path>) -> CliResult<serde_json::Map<String, Value>> {
    let Some(path) = path else { return Ok(Default::default()) };
    let text = std::fs::read_to_string(path)?;
    match serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))? {
        Value::Object(m) => Ok(m),
        _ => Err(usage("config file must hold a JSON object")),
    }
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn run(cli: Cli) -> CliResult<RunOutcome> {
    let started = now_unix_ms();
    let clock = Instant::now();
    let mut cfg = load_config(cli.config.as_deref())?;
    let globals: serde_json::Map<String, Value> = GLOBAL_KEYS.iter().filter_map(|k| cfg.remove(*k).map(|v| (k.to_string(), v))).collect();
    let from_cfg = |k: &str| globals.get(k).cloned();

    let out = match (&cli.out, from_cfg("out")) {
        (Some(p), _) => p.clone(),
        (None, Some(Value::String(s))) => PathBuf::from(s),
        _ => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    };
    let formats: Vec<Format> = match (&cli.format, from_cfg("format")) {
        (Some(f), _) => f.clone(),
        (None, Some(v)) => serde_json::from_value(v).map_err(|e| usage(format!("config format: {e}")))?,
        _ => vec![Format::Json, Format::Csv],
    };
    let formats = bundle::Formats { json: formats.contains(&Format::Json), csv: formats.contains(&Format::Csv) };

    let (sub, resolved, bundle) = match &cli.command {
        Command::Verify(a) => {
            let a = merge(a, &cfg)?;
            ("verify", bundle::to_value(&a), commands::verify(&a)?)
        }
        Command::Solve(a) => {
            let a = merge(a, &cfg)?;
            ("solve", bundle::to_value(&a), commands::solve(&a)?)
        }
        Command::Linear(a) => {
            let a = merge(a, &cfg)?;
            ("linear", bundle::to_value(&a), commands::linear(&a)?)
        }
        Command::Spectral(a) => {
            let a = merge(a, &cfg)?;
            ("spectral", bundle::to_value(&a), commands::spectral(&a)?)
        }
        Command::Counterexample(a) => {
            let a = merge(a, &cfg)?;
            ("counterexample", bundle::to_value(&a), commands::counterexample(&a)?)
        }
        Command::Exponent(a) => {
            let a = merge(a, &cfg)?;
            ("exponent", bundle::to_value(&a), commands::exponent(&a)?)
        }
        Command::Corpus(CorpusArgs { action: CorpusAction::Generate(a) }) => {
            let a = merge(a, &cfg)?;
            ("corpus-generate", bundle::to_value(&a), commands::corpus_generate(&a)?)
        }
        Command::Corpus(CorpusArgs { action: CorpusAction::Describe(a) }) => {
            let a = merge(a, &cfg)?;
            ("corpus-describe", bundle::to_value(&a), commands::corpus_describe(&a)?)
        }
    };
    let name = match (&cli.name, from_cfg("name")) {
        (Some(n), _) => n.clone(),
        (None, Some(Value::String(s))) => s,
        _ => sub.to_string(),
    };
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(usage(format!("bundle name '{name}' must be a plain directory name")));
    }
    let wall = clock.elapsed().as_millis();
    let path = bundle::write(&out, &name, sub, resolved, &bundle, formats, started, wall)?;
    Ok(RunOutcome { bundle: path, failures: bundle.failures(), checks: bundle.checks() })
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(o) => {
            println!("{}", o.bundle.display());
            eprintln!("bmolab: {} checks, {} failed", o.checks, o.failures.len());
            if !o.failures.is_empty() {
                eprintln!("{} of {} checks failed:", o.failures.len(), o.checks);
                for f in &o.failures {
                    eprintln!("  {f}");
                }
            }
            o.exit_code()
        }
        Err(e) => {
            eprintln!("bmolab: {e}");
            2
        }
    }
}
