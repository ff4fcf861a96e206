//! Command-line front end: config ingestion, run orchestration and artifact
//! persistence.
//!
//! Exit codes: 0 pass, 1 verification failure, 2 configuration error,
//! 3 I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exact::{exact_path, BridgeConstruction, ReductionSchedule};
use crate::kernels::{make_grid, sample_brownian, GridScheme, NoiseKind, NoisePath, SeedSpec, TimeGrid};
use crate::sde::{integrate_sde, IntegratorConfig};
use crate::statistics::{
    born_test, convergence_test, independence_test, integral_form_test, martingale_test, run_ensemble_with,
    variance_decay_test, Comparison, ConvergenceConfig, EnsembleOptions, EnsembleSummary, Route, TestEntry, TestReport,
};
use crate::system::{build_system, QuantumSystem};
use crate::timechange::{equivalence_check, EquivalenceReport};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Pass thresholds of the time-change identity.
pub const ETA_GAP_BOUND: f64 = 1e-10;
pub const PROB_GAP_BOUND: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub energies: Vec<f64>,
    /// Complex amplitudes as `[re, im]` pairs.
    pub amplitudes: Vec<[f64; 2]>,
    #[serde(default = "default_tolerance")]
    pub degeneracy_tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_steps: usize,
    #[serde(default = "default_scheme")]
    pub scheme: GridScheme,
    #[serde(default = "default_epsilon")]
    pub epsilon_fraction: f64,
    /// Append a point exactly at `T` (exact route only).
    #[serde(default)]
    pub sentinel: bool,
}

fn default_scheme() -> GridScheme {
    GridScheme::UniformT
}

fn default_epsilon() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub master_seed: u64,
    /// Defaults to `T/4, T/2, 3T/4`.
    #[serde(default)]
    pub probe_times: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_step_counts")]
    pub convergence_step_counts: Vec<usize>,
    #[serde(default = "default_convergence_paths")]
    pub convergence_paths: usize,
    #[serde(default = "default_bound")]
    pub convergence_bound: f64,
    #[serde(default = "default_small_paths")]
    pub integral_form_paths: usize,
    #[serde(default = "default_small_paths")]
    pub equivalence_paths: usize,
}

fn default_step_counts() -> Vec<usize> {
    vec![1 << 10, 1 << 12, 1 << 14]
}

fn default_convergence_paths() -> usize {
    1000
}

fn default_bound() -> f64 {
    1e-2
}

fn default_small_paths() -> usize {
    100
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            convergence_step_counts: default_step_counts(),
            convergence_paths: default_convergence_paths(),
            convergence_bound: default_bound(),
            integral_form_paths: default_small_paths(),
            equivalence_paths: default_small_paths(),
        }
    }
}

/// One JSON document describing a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub schedule: ScheduleConfig,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    #[serde(default = "default_route")]
    pub route: Route,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_route() -> Route {
    Route::Exact
}

/// Validated objects built from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Prepared {
    pub system: QuantumSystem,
    pub schedule: ReductionSchedule,
    pub grid: TimeGrid,
}

impl RunConfig {
    /// Parses a config document. Syntax and type errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks every precondition and builds the system, schedule and grid.
    pub fn prepare(&self) -> Result<Prepared> {
        let s = &self.system;
        if s.energies.is_empty() {
            return Err(Error::config("system.energies", "must not be empty"));
        }
        if let Some(i) = s.energies.iter().position(|e| !e.is_finite()) {
            return Err(Error::config(format!("system.energies[{i}]"), "must be finite"));
        }
        if s.amplitudes.len() != s.energies.len() {
            return Err(Error::config(
                "system.amplitudes",
                format!("{} amplitudes for {} energies", s.amplitudes.len(), s.energies.len()),
            ));
        }
        if let Some(i) = s
            .amplitudes
            .iter()
            .position(|a| !(a[0].is_finite() && a[1].is_finite()))
        {
            return Err(Error::config(format!("system.amplitudes[{i}]"), "must be finite"));
        }
        if !(s.degeneracy_tolerance >= 0.0 && s.degeneracy_tolerance.is_finite()) {
            return Err(Error::config(
                "system.degeneracy_tolerance",
                "must be finite and nonnegative",
            ));
        }
        let amplitudes: Vec<C64> = s.amplitudes.iter().map(|a| C64::new(a[0], a[1])).collect();
        let system = build_system(&s.energies, &amplitudes, s.degeneracy_tolerance).map_err(|e| match e {
            Error::InvalidState(m) => Error::config("system.amplitudes", m),
            Error::InvalidSystem(m) => Error::config("system", m),
            other => other,
        })?;
        let schedule = ReductionSchedule::new(self.schedule.horizon, self.schedule.sigma)?;
        let mut grid = make_grid(
            schedule.horizon(),
            self.grid.n_steps,
            self.grid.scheme,
            self.grid.epsilon_fraction,
        )?;
        if self.grid.sentinel {
            if self.route == Route::Sde {
                return Err(Error::config("grid.sentinel", "the SDE route cannot reach T"));
            }
            grid = grid.with_sentinel();
        }
        if self.ensemble.n_paths == 0 {
            return Err(Error::config("ensemble.n_paths", "must be at least 1"));
        }
        if let Some(probes) = &self.ensemble.probe_times {
            if let Some(i) = probes.iter().position(|&t| !(t >= 0.0 && t < schedule.horizon())) {
                return Err(Error::config(
                    format!("ensemble.probe_times[{i}]"),
                    "must lie in [0, T)",
                ));
            }
        }
        let v = &self.verify;
        if v.convergence_paths == 0 {
            return Err(Error::config("verify.convergence_paths", "must be at least 1"));
        }
        if !(v.convergence_bound > 0.0) {
            return Err(Error::config("verify.convergence_bound", "must be positive"));
        }
        if v.integral_form_paths == 0 {
            return Err(Error::config("verify.integral_form_paths", "must be at least 1"));
        }
        if v.equivalence_paths == 0 {
            return Err(Error::config("verify.equivalence_paths", "must be at least 1"));
        }
        Ok(Prepared { system, schedule, grid })
    }

    fn ensemble_options(&self) -> EnsembleOptions {
        match &self.ensemble.probe_times {
            Some(p) => EnsembleOptions { probe_times: p.clone() },
            None => EnsembleOptions::for_horizon(self.schedule.horizon),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "collapse",
    version,
    about = "Simulate and verify finite-time energy-based state reduction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one path as CSV.
    Simulate(CommonArgs),
    /// Run an ensemble and write its per-time summary.
    Ensemble(CommonArgs),
    /// Run the verification suite and write a JSON report.
    Verify(CommonArgs),
    /// Check the time-change identity path by path.
    Timechange(TimechangeArgs),
}

#[derive(Clone, Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub route: Option<String>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct TimechangeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Drive every path with `B ≡ 0`.
    #[arg(long)]
    pub zero_noise: bool,
}

/// Config after command-line overrides, plus where to write.
struct Invocation {
    config: RunConfig,
    out: PathBuf,
}

fn resolve(args: &CommonArgs) -> std::result::Result<Invocation, (i32, String)> {
    let mut config = RunConfig::load(&args.config).map_err(classify)?;
    if let Some(seed) = args.seed {
        config.ensemble.master_seed = seed;
    }
    if let Some(paths) = args.paths {
        config.ensemble.n_paths = paths;
    }
    if let Some(steps) = args.steps {
        config.grid.n_steps = steps;
    }
    if let Some(route) = &args.route {
        config.route = route.parse().map_err(classify)?;
    }
    let out = match (&args.out, &config.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            return Err((
                EXIT_CONFIG,
                "configuration error in `output_dir`: no output directory given".into(),
            ));
        }
    };
    Ok(Invocation { config, out })
}

fn classify(e: Error) -> (i32, String) {
    let code = match e {
        Error::Io(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    };
    (code, e.to_string())
}

/// Formats a real so that parsing it back gives the same bits.
fn real(x: f64) -> String {
    format!("{x:?}")
}

/// Artifacts written by one command, in emission order.
#[derive(Default)]
struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    /// Writes every artifact and a manifest listing their SHA-256 digests.
    fn write(self, dir: &Path, command: &str, config: &RunConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut listed = Vec::new();
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
            listed.push(json!({
                "name": name,
                "bytes": bytes.len(),
                "sha256": hex::encode(Sha256::digest(bytes)),
            }));
        }
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let manifest = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "created_unix_seconds": created,
            "master_seed": config.ensemble.master_seed,
            "config": config,
            "files": listed,
        });
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(dir.join("manifest.json"), bytes)?;
        Ok(())
    }
}

fn path_csv(times: &[f64], signal: &[f64], signal_name: &str, red: &crate::exact::ReductionPath) -> Vec<u8> {
    let levels = red.probabilities.first().map_or(0, Vec::len);
    let dim = red.amplitudes.first().map_or(0, Vec::len);
    let mut s = format!("t,{signal_name}");
    for i in 0..levels {
        let _ = write!(s, ",pi_{i}");
    }
    s.push_str(",H,V");
    for j in 0..dim {
        let _ = write!(s, ",re_{j},im_{j}");
    }
    s.push('\n');
    for k in 0..times.len() {
        s.push_str(&real(times[k]));
        s.push(',');
        s.push_str(&real(signal[k]));
        for &p in &red.probabilities[k] {
            s.push(',');
            s.push_str(&real(p));
        }
        let _ = write!(s, ",{},{}", real(red.energy[k]), real(red.variance[k]));
        for a in &red.amplitudes[k] {
            let _ = write!(s, ",{},{}", real(a.re), real(a.im));
        }
        s.push('\n');
    }
    s.into_bytes()
}

fn summary_csv(summary: &EnsembleSummary) -> Vec<u8> {
    let levels = summary.born_weights.len();
    let mut s = String::from("t,mean_H,se_H,mean_V,se_V");
    for i in 0..levels {
        let _ = write!(s, ",mean_pi_{i},se_pi_{i}");
    }
    s.push('\n');
    for (k, &t) in summary.grid.times().iter().enumerate() {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            real(t),
            real(summary.mean_h[k]),
            real(summary.se_h[k]),
            real(summary.mean_v[k]),
            real(summary.se_v[k])
        );
        for i in 0..levels {
            let _ = write!(s, ",{},{}", real(summary.mean_pi[k][i]), real(summary.se_pi[k][i]));
        }
        s.push('\n');
    }
    s.into_bytes()
}

fn summary_json(summary: &EnsembleSummary) -> Value {
    json!({
        "route": summary.route,
        "n_paths": summary.n_paths,
        "master_seed": summary.master_seed,
        "n_times": summary.grid.len(),
        "t_max": summary.grid.t_max(),
        "sentinel": summary.grid.has_sentinel(),
        "scheme": summary.grid.scheme(),
        "epsilon_fraction": summary.grid.epsilon_fraction(),
        "born_weights": summary.born_weights,
        "initial_energy": summary.initial_energy,
        "initial_variance": summary.initial_variance,
        "terminal_counts": summary.terminal_counts,
        "terminal_frequencies": summary.terminal_frequencies,
    })
}

fn simulate(inv: &Invocation) -> Result<(bool, Artifacts)> {
    let p = inv.config.prepare()?;
    let seed = SeedSpec::new(inv.config.ensemble.master_seed, 0);
    let mut artifacts = Artifacts::default();
    let csv = match inv.config.route {
        Route::Exact => {
            let (info, red) = exact_path(&p.system, &p.schedule, &p.grid, seed, BridgeConstruction::Exact)?;
            path_csv(p.grid.times(), info.xi(), "xi", &red)
        }
        Route::Sde => {
            let noise = sample_brownian(&p.grid, seed);
            let cfg = IntegratorConfig::new(p.grid.clone(), p.schedule)?;
            let red = integrate_sde(&p.system, &noise, &cfg)?;
            path_csv(p.grid.times(), noise.values(), "W", &red)
        }
    };
    artifacts.add("path.csv", csv);
    Ok((true, artifacts))
}

fn ensemble(inv: &Invocation) -> Result<(bool, Artifacts)> {
    let c = &inv.config;
    let p = c.prepare()?;
    let summary = run_ensemble_with(
        &p.system,
        &p.schedule,
        &p.grid,
        c.ensemble.n_paths,
        c.ensemble.master_seed,
        c.route,
        &c.ensemble_options(),
    )?;
    let mut artifacts = Artifacts::default();
    artifacts.add("summary.csv", summary_csv(&summary));
    artifacts.add_json("summary.json", &summary_json(&summary))?;
    Ok((true, artifacts))
}

/// Full verification suite on the configured system.
pub fn verification_report(config: &RunConfig) -> Result<TestReport> {
    let p = config.prepare()?;
    let grid = match config.route {
        Route::Exact => p.grid.with_sentinel(),
        Route::Sde => p.grid.clone(),
    };
    let summary = run_ensemble_with(
        &p.system,
        &p.schedule,
        &grid,
        config.ensemble.n_paths,
        config.ensemble.master_seed,
        config.route,
        &config.ensemble_options(),
    )?;
    let mut report = TestReport::default();
    report.push(born_test(&summary, &p.system));
    report.extend(martingale_test(&summary));
    report.extend(variance_decay_test(&summary, p.schedule.sigma(), p.schedule.horizon()));
    if config.route == Route::Exact {
        report.extend(independence_test(&summary, p.schedule.horizon())?);
    }

    let v = &config.verify;
    let conv = ConvergenceConfig {
        step_counts: v.convergence_step_counts.clone(),
        n_paths: v.convergence_paths,
        master_seed: config.ensemble.master_seed,
        scheme: config.grid.scheme,
        epsilon_fraction: config.grid.epsilon_fraction,
        bound: v.convergence_bound,
    };
    let study = convergence_test(&p.system, &p.schedule, &conv)?;
    report.extend(study.entries());

    let finest = *v.convergence_step_counts.last().unwrap();
    let if_grid = make_grid(
        p.schedule.horizon(),
        finest,
        config.grid.scheme,
        config.grid.epsilon_fraction,
    )?;
    report.push(integral_form_test(
        &p.system,
        &p.schedule,
        &if_grid,
        v.integral_form_paths,
        config.ensemble.master_seed,
        v.convergence_bound,
    )?);

    let eq = equivalence_study(
        &p,
        &p.grid.without_sentinel(),
        v.equivalence_paths,
        config.ensemble.master_seed,
        false,
    )?;
    report.extend(eq.entries());
    Ok(report)
}

fn verify(inv: &Invocation) -> Result<(bool, Artifacts)> {
    let report = verification_report(&inv.config)?;
    let mut artifacts = Artifacts::default();
    artifacts.add_json("report.json", &report)?;
    Ok((report.passed(), artifacts))
}

/// Worst time-change discrepancies over a set of paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceStudy {
    pub n_paths: usize,
    pub zero_noise: bool,
    pub max_eta_gap: f64,
    pub max_prob_gap: f64,
    pub eta_gap_bound: f64,
    pub prob_gap_bound: f64,
    pub passed: bool,
    pub worst: EquivalenceReport,
}

impl EquivalenceStudy {
    pub fn entries(&self) -> Vec<TestEntry> {
        let meta = json!({ "n_paths": self.n_paths, "zero_noise": self.zero_noise });
        vec![
            TestEntry::new(
                "timechange_eta",
                self.max_eta_gap,
                self.eta_gap_bound,
                Comparison::AtMost,
                meta.clone(),
            ),
            TestEntry::new(
                "timechange_probabilities",
                self.max_prob_gap,
                self.prob_gap_bound,
                Comparison::AtMost,
                meta,
            ),
        ]
    }
}

/// Runs [`equivalence_check`] on `n_paths` exact-route paths whose bridges
/// are built pathwise from Brownian motion.
pub fn equivalence_study(
    prepared: &Prepared,
    grid: &TimeGrid,
    n_paths: usize,
    master_seed: u64,
    zero_noise: bool,
) -> Result<EquivalenceStudy> {
    use rayon::prelude::*;
    let Prepared { system, schedule, .. } = prepared;
    let reports: Vec<EquivalenceReport> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let seed = SeedSpec::new(master_seed, i as u64);
            let bm = if zero_noise {
                NoisePath::new(grid.clone(), vec![0.0; grid.len()], NoiseKind::Brownian)?
            } else {
                sample_brownian(grid, seed)
            };
            let level = crate::exact::sample_terminal_energy(system, seed);
            let bridge = crate::kernels::bridge_from_bm(&bm, schedule.horizon())?;
            let info = crate::exact::information_process(level, &bridge, schedule, system)?;
            let red = crate::exact::reduce(&info, system, schedule)?;
            equivalence_check(&info, &red, schedule.horizon(), schedule.sigma(), system)
        })
        .collect::<Result<_>>()?;
    let mut worst = reports[0].clone();
    let (mut max_eta, mut max_prob) = (0.0f64, 0.0f64);
    for r in &reports {
        max_eta = max_eta.max(r.max_eta_gap);
        max_prob = max_prob.max(r.max_prob_gap);
        if r.max_eta_gap.max(r.max_prob_gap) > worst.max_eta_gap.max(worst.max_prob_gap) {
            worst = r.clone();
        }
    }
    Ok(EquivalenceStudy {
        n_paths,
        zero_noise,
        max_eta_gap: max_eta,
        max_prob_gap: max_prob,
        eta_gap_bound: ETA_GAP_BOUND,
        prob_gap_bound: PROB_GAP_BOUND,
        passed: max_eta <= ETA_GAP_BOUND && max_prob <= PROB_GAP_BOUND,
        worst,
    })
}

fn timechange(inv: &Invocation, zero_noise: bool) -> Result<(bool, Artifacts)> {
    let c = &inv.config;
    if c.route != Route::Exact {
        return Err(Error::config(
            "route",
            "the time-change check needs the exact route with a pathwise bridge",
        ));
    }
    let p = c.prepare()?;
    let grid = p.grid.without_sentinel();
    let study = equivalence_study(&p, &grid, c.ensemble.n_paths, c.ensemble.master_seed, zero_noise)?;
    let mut artifacts = Artifacts::default();
    artifacts.add_json("equivalence.json", &study)?;
    Ok((study.passed, artifacts))
}

/// Runs one parsed command and returns its exit code.
pub fn execute(cli: &Cli) -> i32 {
    let (name, args, zero_noise) = match &cli.command {
        Command::Simulate(a) => ("simulate", a, false),
        Command::Ensemble(a) => ("ensemble", a, false),
        Command::Verify(a) => ("verify", a, false),
        Command::Timechange(a) => ("timechange", &a.common, a.zero_noise),
    };
    let inv = match resolve(args) {
        Ok(inv) => inv,
        Err((code, msg)) => {
            eprintln!("collapse {name}: {msg}");
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("collapse {name}: cannot start worker pool: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = pool.install(|| match name {
        "simulate" => simulate(&inv),
        "ensemble" => ensemble(&inv),
        "verify" => verify(&inv),
        _ => timechange(&inv, zero_noise),
    });
    let result = outcome.and_then(|(passed, artifacts)| {
        artifacts.write(&inv.out, name, &inv.config)?;
        Ok(passed)
    });
    match result {
        Ok(true) => EXIT_PASS,
        Ok(false) => {
            eprintln!("collapse {name}: verification failed; see {}", inv.out.display());
            EXIT_FAIL
        }
        Err(e) => {
            let (code, msg) = classify(e);
            eprintln!("collapse {name}: {msg}");
            code
        }
    }
}

/// Parses arguments (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_PASS
            }
        }
    }
}
