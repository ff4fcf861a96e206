//! Monte Carlo ensembles and the statistical checks run on them.
//!
//! Paths are generated in parallel but aggregated in a fixed order: paths are
//! grouped into chunks of [`CHUNK_PATHS`], each chunk is summed sequentially,
//! and chunk totals are merged in chunk order with compensated summation. A
//! summary therefore depends only on the inputs and the seed, never on the
//! number of worker threads.
//!
//! Statistical checks use fixed four-standard-error bands, which a correct
//! implementation violates with probability below about `6e-5` per
//! comparison. Checks that compare many grid times are correlated across
//! times, so the suite-level flake rate stays of the same order.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::exact::{exact_path, reconstruct_noise, BridgeConstruction, ReductionSchedule};
use crate::kernels::{make_grid, sample_brownian, GridScheme, SeedSpec, TimeGrid};
use crate::sde::{integral_form_state, integrate_sde, IntegratorConfig};
use crate::system::{energy_moments, norm, QuantumSystem};
use crate::timechange::tau_of_t;

/// Paths summed sequentially before chunk totals are merged.
pub const CHUNK_PATHS: usize = 64;
/// Chunks generated concurrently before being folded into the running total.
const CHUNKS_PER_BATCH: usize = 64;
/// Standard errors below this are treated as this value, so deviations at
/// rounding level do not count as infinitely many standard errors.
pub const SE_FLOOR: f64 = 1e-13;
/// Width of the statistical bands, in standard errors.
pub const Z_BAND: f64 = 4.0;

/// Which solver produces the ensemble's paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Exact,
    Sde,
}

impl FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Route::Exact),
            "sde" => Ok(Route::Sde),
            other => Err(Error::config(
                "route",
                format!("expected `exact` or `sde`, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Exact => "exact",
            Route::Sde => "sde",
        })
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: &Compensated) {
        self.add(other.sum);
        self.comp += other.comp;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sample mean and its standard error from shifted sums.
fn mean_and_se(shift: f64, s1: f64, s2: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean_dev = s1 / nf;
    let se = if n > 1 {
        let var = ((s2 - s1 * mean_dev) / (nf - 1.0)).max(0.0);
        (var / nf).sqrt()
    } else {
        0.0
    };
    (shift + mean_dev, se)
}

/// Paired samples `(β_t, H_T)` at one probe time, with `β_t = ξ_t − σ t H_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSamples {
    pub time: f64,
    pub beta: Vec<f64>,
    pub terminal_energy: Vec<f64>,
}

/// Cross-path statistics of an ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleSummary {
    pub route: Route,
    pub n_paths: usize,
    pub master_seed: u64,
    pub grid: TimeGrid,
    pub mean_h: Vec<f64>,
    pub se_h: Vec<f64>,
    pub mean_v: Vec<f64>,
    pub se_v: Vec<f64>,
    /// Indexed by time, then level.
    pub mean_pi: Vec<Vec<f64>>,
    pub se_pi: Vec<Vec<f64>>,
    pub terminal_counts: Vec<u64>,
    pub terminal_frequencies: Vec<f64>,
    /// Empty on the SDE route, where the bridge is not observed.
    pub covariance_samples: Vec<CovarianceSamples>,
    pub born_weights: Vec<f64>,
    pub initial_energy: f64,
    pub initial_variance: f64,
}

/// Tunables of [`run_ensemble_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOptions {
    /// Times at which `(β_t, H_T)` pairs are kept; each is moved to the
    /// nearest grid point. Only used on the exact route.
    pub probe_times: Vec<f64>,
}

impl EnsembleOptions {
    /// Probes at `T/4`, `T/2` and `3T/4`.
    pub fn for_horizon(horizon: f64) -> Self {
        Self {
            probe_times: vec![0.25 * horizon, 0.5 * horizon, 0.75 * horizon],
        }
    }
}

struct PathRecord {
    energy: Vec<f64>,
    variance: Vec<f64>,
    probabilities: Vec<Vec<f64>>,
    terminal_level: usize,
    probes: Vec<(f64, f64)>,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn simulate_path(
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
    grid: &TimeGrid,
    route: Route,
    seed: SeedSpec,
    probe_indices: &[usize],
) -> Result<PathRecord> {
    match route {
        Route::Exact => {
            let (info, red) = exact_path(system, schedule, grid, seed, BridgeConstruction::Exact)?;
            let level = info.terminal_level();
            let h_terminal = system.energies()[level];
            let times = grid.times();
            let probes = probe_indices
                .iter()
                .map(|&k| (info.xi()[k] - schedule.sigma() * times[k] * h_terminal, h_terminal))
                .collect();
            Ok(PathRecord {
                energy: red.energy,
                variance: red.variance,
                probabilities: red.probabilities,
                terminal_level: level,
                probes,
            })
        }
        Route::Sde => {
            let noise = sample_brownian(grid, seed);
            let config = IntegratorConfig::new(grid.clone(), *schedule)?;
            let path = integrate_sde(system, &noise, &config)?;
            let level = argmax(&path.probabilities[grid.t_max_index()]);
            Ok(PathRecord {
                energy: path.energy,
                variance: path.variance,
                probabilities: path.probabilities,
                terminal_level: level,
                probes: Vec::new(),
            })
        }
    }
}

/// Per-time sums of shifted values and their squares; channels are
/// `H, V, π_0, …, π_{L−1}`.
#[derive(Clone)]
struct Accumulator {
    channels: usize,
    s1: Vec<Compensated>,
    s2: Vec<Compensated>,
    counts: Vec<u64>,
}

impl Accumulator {
    fn new(n_times: usize, n_levels: usize) -> Self {
        let channels = 2 + n_levels;
        Self {
            channels,
            s1: vec![Compensated::default(); n_times * channels],
            s2: vec![Compensated::default(); n_times * channels],
            counts: vec![0; n_levels],
        }
    }

    fn add_path(&mut self, rec: &PathRecord, shift: &PathRecord) {
        let c = self.channels;
        for k in 0..rec.energy.len() {
            let base = k * c;
            let mut push = |ch: usize, x: f64| {
                self.s1[base + ch].add(x);
                self.s2[base + ch].add(x * x);
            };
            push(0, rec.energy[k] - shift.energy[k]);
            push(1, rec.variance[k] - shift.variance[k]);
            for (i, (&p, &p0)) in rec.probabilities[k].iter().zip(&shift.probabilities[k]).enumerate() {
                push(2 + i, p - p0);
            }
        }
        self.counts[rec.terminal_level] += 1;
    }

    fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            a.merge(b);
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            a.merge(b);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// One chunk's sums and its `(β_t, H_T)` pairs per probe time.
type ChunkResult = (Accumulator, Vec<Vec<(f64, f64)>>);

/// [`run_ensemble_with`] with probes at `T/4`, `T/2`, `3T/4`.
pub fn run_ensemble(
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
    grid: &TimeGrid,
    n_paths: usize,
    master_seed: u64,
    route: Route,
) -> Result<EnsembleSummary> {
    let options = EnsembleOptions::for_horizon(schedule.horizon());
    run_ensemble_with(system, schedule, grid, n_paths, master_seed, route, &options)
}

/// Runs `n_paths` independent paths and aggregates them per grid time.
///
/// Path `i` uses seed `(master_seed, i)`. The exact route accepts a grid
/// with a sentinel at `T` and classifies by the sampled terminal energy; the
/// SDE route needs a grid ending before `T` and classifies by the most
/// probable level at `t_max`.
pub fn run_ensemble_with(
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
    grid: &TimeGrid,
    n_paths: usize,
    master_seed: u64,
    route: Route,
    options: &EnsembleOptions,
) -> Result<EnsembleSummary> {
    if n_paths == 0 {
        return Err(Error::config("ensemble.n_paths", "must be at least 1"));
    }
    if grid.horizon() != schedule.horizon() {
        return Err(Error::config("grid", "grid horizon differs from schedule.T"));
    }
    if route == Route::Sde && grid.has_sentinel() {
        return Err(Error::config("grid", "the SDE route cannot integrate up to T"));
    }
    let probe_indices: Vec<usize> = match route {
        Route::Exact => options.probe_times.iter().map(|&t| grid.nearest_index(t)).collect(),
        Route::Sde => Vec::new(),
    };

    // Path 0 supplies the per-time shift: constant columns then sum to
    // exactly zero and the shifted sums of squares stay well conditioned.
    let shift = simulate_path(
        system,
        schedule,
        grid,
        route,
        SeedSpec::new(master_seed, 0),
        &probe_indices,
    )?;
    let n_times = grid.len();
    let n_levels = system.num_levels();

    let n_chunks = n_paths.div_ceil(CHUNK_PATHS);
    let mut total = Accumulator::new(n_times, n_levels);
    let mut probes: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(n_paths); probe_indices.len()];
    let mut chunk_start = 0;
    while chunk_start < n_chunks {
        let chunk_end = (chunk_start + CHUNKS_PER_BATCH).min(n_chunks);
        let batch: Vec<ChunkResult> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|chunk| {
                let mut acc = Accumulator::new(n_times, n_levels);
                let mut chunk_probes = vec![Vec::with_capacity(CHUNK_PATHS); probe_indices.len()];
                let first = chunk * CHUNK_PATHS;
                let last = (first + CHUNK_PATHS).min(n_paths);
                for i in first..last {
                    let seed = SeedSpec::new(master_seed, i as u64);
                    let rec = simulate_path(system, schedule, grid, route, seed, &probe_indices)?;
                    acc.add_path(&rec, &shift);
                    for (dst, &pair) in chunk_probes.iter_mut().zip(&rec.probes) {
                        dst.push(pair);
                    }
                }
                Ok((acc, chunk_probes))
            })
            .collect::<Result<_>>()?;
        for (acc, chunk_probes) in batch {
            total.merge(&acc);
            for (dst, src) in probes.iter_mut().zip(chunk_probes) {
                dst.extend(src);
            }
        }
        chunk_start = chunk_end;
    }

    let c = total.channels;
    let stat = |k: usize, ch: usize, shift_value: f64| {
        mean_and_se(
            shift_value,
            total.s1[k * c + ch].value(),
            total.s2[k * c + ch].value(),
            n_paths,
        )
    };
    let mut summary_h = (Vec::with_capacity(n_times), Vec::with_capacity(n_times));
    let mut summary_v = (Vec::with_capacity(n_times), Vec::with_capacity(n_times));
    let mut mean_pi = Vec::with_capacity(n_times);
    let mut se_pi = Vec::with_capacity(n_times);
    for k in 0..n_times {
        let (m, s) = stat(k, 0, shift.energy[k]);
        summary_h.0.push(m);
        summary_h.1.push(s);
        let (m, s) = stat(k, 1, shift.variance[k]);
        summary_v.0.push(m);
        summary_v.1.push(s);
        let (mp, sp): (Vec<f64>, Vec<f64>) = (0..n_levels).map(|i| stat(k, 2 + i, shift.probabilities[k][i])).unzip();
        mean_pi.push(mp);
        se_pi.push(sp);
    }

    let times = grid.times();
    let covariance_samples = probe_indices
        .iter()
        .zip(probes)
        .map(|(&k, pairs)| {
            let (beta, terminal_energy) = pairs.into_iter().unzip();
            CovarianceSamples {
                time: times[k],
                beta,
                terminal_energy,
            }
        })
        .collect();
    let (initial_energy, initial_variance) = energy_moments(system);
    Ok(EnsembleSummary {
        route,
        n_paths,
        master_seed,
        grid: grid.clone(),
        mean_h: summary_h.0,
        se_h: summary_h.1,
        mean_v: summary_v.0,
        se_v: summary_v.1,
        mean_pi,
        se_pi,
        terminal_frequencies: total.counts.iter().map(|&n| n as f64 / n_paths as f64).collect(),
        terminal_counts: total.counts,
        covariance_samples,
        born_weights: system.born_weights().to_vec(),
        initial_energy,
        initial_variance,
    })
}

/// How a test statistic is compared with its threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    /// Pass iff `statistic ≤ threshold`.
    AtMost,
    /// Pass iff `statistic < threshold`.
    Below,
    /// Pass iff `statistic ≥ threshold`.
    AtLeast,
}

impl Comparison {
    pub fn holds(self, statistic: f64, threshold: f64) -> bool {
        match self {
            Comparison::AtMost => statistic <= threshold,
            Comparison::Below => statistic < threshold,
            Comparison::AtLeast => statistic >= threshold,
        }
    }
}

/// One verdict. `passed` always equals `comparison.holds(statistic, threshold)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub passed: bool,
    pub metadata: Value,
}

impl TestEntry {
    pub fn new(name: &str, statistic: f64, threshold: f64, comparison: Comparison, metadata: Value) -> Self {
        Self {
            name: name.to_string(),
            statistic,
            threshold,
            comparison,
            passed: comparison.holds(statistic, threshold),
            metadata,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub entries: Vec<TestEntry>,
}

impl TestReport {
    pub fn push(&mut self, entry: TestEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = TestEntry>) {
        self.entries.extend(entries);
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn get(&self, name: &str) -> Option<&TestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// `|deviation| / max(se, SE_FLOOR)`.
fn z_score(deviation: f64, se: f64) -> f64 {
    deviation.abs() / se.max(SE_FLOOR)
}

/// Terminal frequencies against the Born weights, in binomial standard errors.
pub fn born_test(summary: &EnsembleSummary, system: &QuantumSystem) -> TestEntry {
    let n = summary.n_paths as f64;
    let mut worst = 0.0f64;
    let mut per_level = Vec::new();
    for (&p, &f) in system.born_weights().iter().zip(&summary.terminal_frequencies) {
        if p == 0.0 {
            continue;
        }
        let z = z_score(f - p, (p * (1.0 - p) / n).sqrt());
        worst = worst.max(z);
        per_level.push(json!({ "born_weight": p, "frequency": f, "z": z }));
    }
    TestEntry::new(
        "born_law",
        worst,
        Z_BAND,
        Comparison::AtMost,
        json!({ "n_paths": summary.n_paths, "levels": per_level }),
    )
}

/// Drift-free energy and probabilities: at every grid time the ensemble mean
/// stays within four standard errors of its initial value.
pub fn martingale_test(summary: &EnsembleSummary) -> Vec<TestEntry> {
    let h0 = summary.mean_h[0];
    let (mut worst_h, mut at_h) = (0.0f64, 0usize);
    for (k, (&m, &se)) in summary.mean_h.iter().zip(&summary.se_h).enumerate() {
        let z = z_score(m - h0, se);
        if z > worst_h {
            worst_h = z;
            at_h = k;
        }
    }
    let (mut worst_p, mut at_p, mut level_p) = (0.0f64, 0usize, 0usize);
    for (k, (row, se_row)) in summary.mean_pi.iter().zip(&summary.se_pi).enumerate() {
        for (i, ((&m, &se), &p)) in row.iter().zip(se_row).zip(&summary.born_weights).enumerate() {
            let z = z_score(m - p, se);
            if z > worst_p {
                worst_p = z;
                at_p = k;
                level_p = i;
            }
        }
    }
    let times = summary.grid.times();
    vec![
        TestEntry::new(
            "energy_martingale",
            worst_h,
            Z_BAND,
            Comparison::AtMost,
            json!({ "reference": h0, "n_times": times.len(), "worst_time": times[at_h] }),
        ),
        TestEntry::new(
            "probability_martingale",
            worst_p,
            Z_BAND,
            Comparison::AtMost,
            json!({ "n_times": times.len(), "worst_time": times[at_p], "worst_level": level_p }),
        ),
    ]
}

/// Consequences of the decay of the mean energy variance `V̄_t`:
/// a ceiling at `V_0`, monotone decrease between consecutive grid times,
/// the bound `V̄_t (1 + σ²τ(t) V̄_t) ≤ V_0`, decay between `0.5 t_max` and
/// `0.999 t_max`, and on exact-route grids with a sentinel, `V̄_T = 0`.
pub fn variance_decay_test(summary: &EnsembleSummary, sigma: f64, horizon: f64) -> Vec<TestEntry> {
    let v0 = summary.initial_variance;
    let grid = &summary.grid;
    let times = grid.times();
    let end = grid.t_max_index();
    let mv = &summary.mean_v;
    let se = &summary.se_v;

    let ceiling = (0..=end)
        .map(|k| (mv[k] - v0).max(0.0) / se[k].max(SE_FLOOR))
        .fold(0.0, f64::max);

    let monotone = (0..end)
        .map(|k| {
            let rise = (mv[k + 1] - mv[k]).max(0.0);
            rise / (se[k] * se[k] + se[k + 1] * se[k + 1]).sqrt().max(SE_FLOOR)
        })
        .fold(0.0, f64::max);

    let mut bound = 0.0f64;
    for k in 0..=end {
        let Ok(tau) = tau_of_t(times[k], horizon) else { continue };
        let s2tau = sigma * sigma * tau;
        let excess = mv[k] * (1.0 + s2tau * mv[k]) - v0;
        let se_f = (1.0 + 2.0 * s2tau * mv[k]) * se[k];
        bound = bound.max(excess.max(0.0) / se_f.max(SE_FLOOR));
    }

    let t_max = grid.t_max();
    let mid = grid.nearest_index(0.5 * t_max);
    let late = grid.nearest_index(0.999 * t_max);
    // Already-collapsed ensembles (0/0) count as decayed.
    let late_ratio = if mv[mid] == 0.0 && mv[late] == 0.0 {
        0.0
    } else {
        mv[late] / mv[mid]
    };
    let mut entries = vec![
        TestEntry::new(
            "variance_ceiling",
            ceiling,
            Z_BAND,
            Comparison::AtMost,
            json!({ "v0": v0 }),
        ),
        TestEntry::new("variance_monotone", monotone, Z_BAND, Comparison::AtMost, json!({})),
        TestEntry::new(
            "variance_jensen_bound",
            bound,
            Z_BAND,
            Comparison::AtMost,
            json!({ "v0": v0 }),
        ),
        TestEntry::new(
            "variance_late_decay",
            late_ratio,
            1.0,
            Comparison::Below,
            json!({ "t_mid": times[mid], "v_mid": mv[mid], "t_late": times[late], "v_late": mv[late] }),
        ),
    ];
    if summary.route == Route::Exact && grid.has_sentinel() {
        let last = times.len() - 1;
        entries.push(TestEntry::new(
            "variance_terminal",
            mv[last].abs(),
            f64::EPSILON,
            Comparison::AtMost,
            json!({ "time": times[last] }),
        ));
    }
    entries
}

/// Sample covariance of paired data together with its standard error.
/// Data are shifted by their first values, so constant inputs give exactly 0.
pub fn covariance_with_se(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let nf = n as f64;
    let (x0, y0) = (x[0], y[0]);
    let mut sx = Compensated::default();
    let mut sy = Compensated::default();
    for (&a, &b) in x.iter().zip(y) {
        sx.add(a - x0);
        sy.add(b - y0);
    }
    let (mx, my) = (sx.value() / nf, sy.value() / nf);
    let mut sp = Compensated::default();
    let mut sp2 = Compensated::default();
    for (&a, &b) in x.iter().zip(y) {
        let p = (a - x0 - mx) * (b - y0 - my);
        sp.add(p);
        sp2.add(p * p);
    }
    let cov = sp.value() / (nf - 1.0);
    let mean_p = sp.value() / nf;
    let var_p = ((sp2.value() - nf * mean_p * mean_p) / (nf - 1.0)).max(0.0);
    (cov, (var_p / nf).sqrt())
}

/// Paths needed before the 5% bridge-variance check is applied: the sample
/// variance has relative standard error `√(2/N)`, so 5% spans four standard
/// errors from here on.
pub const VARIANCE_CHECK_MIN_PATHS: usize = 12_800;

/// Independence of `β_t` and `H_T` at the probe times, plus the bridge
/// variance `t(T − t)/T` there once the ensemble has at least
/// [`VARIANCE_CHECK_MIN_PATHS`] paths.
pub fn independence_test(summary: &EnsembleSummary, horizon: f64) -> Result<Vec<TestEntry>> {
    if summary.covariance_samples.is_empty() {
        return Err(Error::Unsupported(
            "independence test needs (β_t, H_T) samples from an exact-route ensemble".into(),
        ));
    }
    let mut worst_cov = 0.0f64;
    let mut worst_var = 0.0f64;
    let mut probes = Vec::new();
    for s in &summary.covariance_samples {
        let (cov, se) = covariance_with_se(&s.beta, &s.terminal_energy);
        let z = z_score(cov, se);
        worst_cov = worst_cov.max(z);
        let (var, _) = covariance_with_se(&s.beta, &s.beta);
        let expected = s.time * (horizon - s.time) / horizon;
        let rel = if expected > 0.0 {
            (var - expected).abs() / expected
        } else {
            var.abs()
        };
        worst_var = worst_var.max(rel);
        probes.push(json!({ "time": s.time, "cov": cov, "se": se, "z": z, "var_beta": var, "var_expected": expected }));
    }
    let mut entries = vec![TestEntry::new(
        "independence",
        worst_cov,
        Z_BAND,
        Comparison::AtMost,
        json!({ "n_paths": summary.n_paths, "probes": probes }),
    )];
    if summary.n_paths >= VARIANCE_CHECK_MIN_PATHS {
        entries.push(TestEntry::new(
            "bridge_variance",
            worst_var,
            0.05,
            Comparison::AtMost,
            json!({}),
        ));
    }
    Ok(entries)
}

/// Settings of the route-consistency study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    /// Increasing step counts, each dividing the next.
    pub step_counts: Vec<usize>,
    pub n_paths: usize,
    pub master_seed: u64,
    pub scheme: GridScheme,
    pub epsilon_fraction: f64,
    /// Upper bound on the RMS energy gap at the finest resolution.
    pub bound: f64,
}

impl ConvergenceConfig {
    /// Step counts `2¹⁰, 2¹², 2¹⁴` on a uniform grid ending at `0.999 T`.
    pub fn desk(n_paths: usize, master_seed: u64) -> Self {
        Self {
            step_counts: vec![1 << 10, 1 << 12, 1 << 14],
            n_paths,
            master_seed,
            scheme: GridScheme::UniformT,
            epsilon_fraction: 1e-3,
            bound: 1e-2,
        }
    }
}

/// Outcome of [`convergence_test`], one entry per step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub step_counts: Vec<usize>,
    /// RMS over paths of `H_{t_max}` (SDE) minus `H_{t_max}` (exact).
    pub rms_energy_gaps: Vec<f64>,
    /// `gap[j + 1] / gap[j]`.
    pub gap_ratios: Vec<f64>,
    /// Largest `|‖ψ‖ − 1|` over all steps and paths with renormalization.
    pub max_norm_error: Vec<f64>,
    /// Mean over steps and paths of `|‖ψ_{k+1}‖/‖ψ_k‖ − 1|` without renormalization.
    pub raw_norm_drift: Vec<f64>,
    /// Fraction of paths whose most probable level at `t_max` is the exact
    /// route's terminal level.
    pub classification_agreement: Vec<f64>,
    pub bound: f64,
}

impl ConvergenceStudy {
    /// Whether `a` is strictly below `b`, counting two exact zeros as a tie
    /// that does not break the ordering.
    fn decreases(b: f64, a: f64) -> bool {
        a < b || (a == 0.0 && b == 0.0)
    }

    pub fn entries(&self) -> Vec<TestEntry> {
        let n = self.step_counts.len();
        let gaps_decrease = self.rms_energy_gaps.windows(2).all(|w| Self::decreases(w[0], w[1]));
        let drift_decrease = self.raw_norm_drift.windows(2).all(|w| Self::decreases(w[0], w[1]));
        let finest = self.rms_energy_gaps[n - 1];
        let meta = json!({
            "step_counts": self.step_counts,
            "rms_energy_gaps": self.rms_energy_gaps,
            "gap_ratios": self.gap_ratios,
        });
        vec![
            TestEntry::new(
                "convergence_monotone",
                if gaps_decrease { 0.0 } else { 1.0 },
                0.0,
                Comparison::AtMost,
                meta.clone(),
            ),
            TestEntry::new("convergence_finest_gap", finest, self.bound, Comparison::Below, meta),
            TestEntry::new(
                "norm_preservation",
                self.max_norm_error.iter().copied().fold(0.0, f64::max),
                1e-12,
                Comparison::AtMost,
                json!({ "max_norm_error": self.max_norm_error }),
            ),
            TestEntry::new(
                "norm_drift_monotone",
                if drift_decrease { 0.0 } else { 1.0 },
                0.0,
                Comparison::AtMost,
                json!({ "raw_norm_drift": self.raw_norm_drift }),
            ),
            TestEntry::new(
                "route_classification_agreement",
                self.classification_agreement[n - 1],
                0.99,
                Comparison::AtLeast,
                json!({ "classification_agreement": self.classification_agreement }),
            ),
        ]
    }
}

fn check_nested(step_counts: &[usize]) -> Result<()> {
    if step_counts.is_empty() {
        return Err(Error::config(
            "convergence.step_counts",
            "at least one step count is required",
        ));
    }
    for w in step_counts.windows(2) {
        if !(w[1] > w[0] && w[1] % w[0] == 0) {
            return Err(Error::config(
                "convergence.step_counts",
                format!("{} does not refine {}", w[1], w[0]),
            ));
        }
    }
    Ok(())
}

struct PathGaps {
    sq_gap: Vec<f64>,
    norm_error: Vec<f64>,
    drift_sum: Vec<f64>,
    agree: Vec<bool>,
}

fn max_norm_error(amplitudes: &[Vec<num_complex::Complex64>]) -> f64 {
    amplitudes.iter().map(|a| (norm(a) - 1.0).abs()).fold(0.0, f64::max)
}

fn mean_step_drift(amplitudes: &[Vec<num_complex::Complex64>]) -> f64 {
    let norms: Vec<f64> = amplitudes.iter().map(|a| norm(a)).collect();
    let steps = norms.len() - 1;
    norms.windows(2).map(|w| (w[1] / w[0] - 1.0).abs()).sum::<f64>() / steps as f64
}

/// Runs the closed-form route on the finest grid, reconstructs the driving
/// noise from it, restricts that noise to each coarser grid and integrates
/// the SDE there. Gaps are taken at the common last grid time `t_max`.
pub fn convergence_test(
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
    config: &ConvergenceConfig,
) -> Result<ConvergenceStudy> {
    check_nested(&config.step_counts)?;
    if config.n_paths == 0 {
        return Err(Error::config("convergence.n_paths", "must be at least 1"));
    }
    let finest = *config.step_counts.last().unwrap();
    let grid = make_grid(schedule.horizon(), finest, config.scheme, config.epsilon_fraction)?;
    let m = config.step_counts.len();

    let per_path: Vec<PathGaps> = (0..config.n_paths)
        .into_par_iter()
        .map(|i| {
            let seed = SeedSpec::new(config.master_seed, i as u64);
            let (info, red) = exact_path(system, schedule, &grid, seed, BridgeConstruction::Exact)?;
            let w = reconstruct_noise(&info, &red, schedule)?;
            let h_exact = *red.energy.last().unwrap();
            let mut out = PathGaps {
                sq_gap: Vec::with_capacity(m),
                norm_error: Vec::with_capacity(m),
                drift_sum: Vec::with_capacity(m),
                agree: Vec::with_capacity(m),
            };
            for &n in &config.step_counts {
                let wc = w.coarsen(finest / n)?;
                let cfg = IntegratorConfig::new(wc.grid().clone(), *schedule)?;
                let path = integrate_sde(system, &wc, &cfg)?;
                let gap = path.energy.last().unwrap() - h_exact;
                out.sq_gap.push(gap * gap);
                out.norm_error.push(max_norm_error(&path.amplitudes));
                out.agree
                    .push(argmax(path.probabilities.last().unwrap()) == info.terminal_level());
                let raw = integrate_sde(system, &wc, &cfg.with_renormalization(false))?;
                out.drift_sum.push(mean_step_drift(&raw.amplitudes));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let nf = config.n_paths as f64;
    let mut rms = vec![0.0; m];
    let mut norm_err = vec![0.0f64; m];
    let mut drift = vec![0.0; m];
    let mut agree = vec![0.0; m];
    for j in 0..m {
        let mut sq = Compensated::default();
        let mut dr = Compensated::default();
        let mut hits = 0usize;
        for p in &per_path {
            sq.add(p.sq_gap[j]);
            dr.add(p.drift_sum[j]);
            norm_err[j] = norm_err[j].max(p.norm_error[j]);
            hits += p.agree[j] as usize;
        }
        rms[j] = (sq.value() / nf).sqrt();
        drift[j] = dr.value() / nf;
        agree[j] = hits as f64 / nf;
    }
    let gap_ratios = rms
        .windows(2)
        .map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] })
        .collect();
    Ok(ConvergenceStudy {
        step_counts: config.step_counts.clone(),
        rms_energy_gaps: rms,
        gap_ratios,
        max_norm_error: norm_err,
        raw_norm_drift: drift,
        classification_agreement: agree,
        bound: config.bound,
    })
}

/// Integral-form state at `t_max` against the SDE terminal state on the same
/// reconstructed noise and grid. The statistic is the RMS over paths of
/// `‖ψ_int − ψ_sde‖`; the tolerance is the route-consistency bound.
pub fn integral_form_test(
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
    grid: &TimeGrid,
    n_paths: usize,
    master_seed: u64,
    tolerance: f64,
) -> Result<TestEntry> {
    if n_paths == 0 {
        return Err(Error::config("ensemble.n_paths", "must be at least 1"));
    }
    let gaps: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let seed = SeedSpec::new(master_seed, i as u64);
            let (info, red) = exact_path(system, schedule, grid, seed, BridgeConstruction::Exact)?;
            let w = reconstruct_noise(&info, &red, schedule)?;
            let cfg = IntegratorConfig::new(grid.clone(), *schedule)?;
            let path = integrate_sde(system, &w, &cfg)?;
            let psi_int = integral_form_state(&w, &path.energy, system, schedule)?;
            let psi_sde = path.amplitudes.last().unwrap();
            let d: f64 = psi_int.iter().zip(psi_sde).map(|(a, b)| (a - b).norm_sqr()).sum();
            Ok((d, d.sqrt()))
        })
        .collect::<Result<_>>()?;
    let mut sq = Compensated::default();
    let mut worst = 0.0f64;
    for &(d, r) in &gaps {
        sq.add(d);
        worst = worst.max(r);
    }
    let rms = (sq.value() / n_paths as f64).sqrt();
    Ok(TestEntry::new(
        "integral_form",
        rms,
        tolerance,
        Comparison::AtMost,
        json!({ "n_paths": n_paths, "n_steps": grid.n_steps(), "max_gap": worst }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::make_grid;
    use crate::system::build_system;
    use num_complex::Complex64 as C64;

    fn desk() -> QuantumSystem {
        build_system(
            &[0.0, 1.0],
            &[C64::new(0.3f64.sqrt(), 0.0), C64::new(0.7f64.sqrt(), 0.0)],
            1e-9,
        )
        .unwrap()
    }

    fn single() -> QuantumSystem {
        build_system(&[2.5], &[C64::new(1.0, 0.0)], 1e-9).unwrap()
    }

    fn unit() -> ReductionSchedule {
        ReductionSchedule::new(1.0, 1.0).unwrap()
    }

    fn synthetic(mean_h: Vec<f64>, se_h: Vec<f64>, freq: Vec<f64>, n: usize) -> EnsembleSummary {
        let len = mean_h.len();
        let times: Vec<f64> = (0..len).map(|k| 0.5 * k as f64 / len as f64).collect();
        EnsembleSummary {
            route: Route::Exact,
            n_paths: n,
            master_seed: 0,
            grid: TimeGrid::from_times(1.0, times).unwrap(),
            mean_h,
            se_h: se_h.clone(),
            mean_v: vec![0.21; len],
            se_v: se_h,
            mean_pi: vec![vec![0.3, 0.7]; len],
            se_pi: vec![vec![0.01, 0.01]; len],
            terminal_counts: freq.iter().map(|&f| (f * n as f64).round() as u64).collect(),
            terminal_frequencies: freq,
            covariance_samples: Vec::new(),
            born_weights: vec![0.3, 0.7],
            initial_energy: 0.7,
            initial_variance: 0.21,
        }
    }

    #[test]
    fn route_parsing() {
        assert_eq!("exact".parse::<Route>().unwrap(), Route::Exact);
        assert_eq!("sde".parse::<Route>().unwrap(), Route::Sde);
        assert!(matches!("euler".parse::<Route>(), Err(Error::Config { field, .. }) if field == "route"));
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = Compensated::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    #[test]
    fn single_level_ensemble_is_constant() {
        let sys = single();
        let grid = make_grid(1.0, 50, GridScheme::UniformT, 1e-3).unwrap().with_sentinel();
        for route in [Route::Exact, Route::Sde] {
            let g = if route == Route::Sde {
                grid.without_sentinel()
            } else {
                grid.clone()
            };
            let s = run_ensemble(&sys, &unit(), &g, 1, 3, route).unwrap();
            assert!(s.mean_h.iter().all(|&h| h == 2.5));
            assert!(s.mean_v.iter().all(|&v| v == 0.0));
            assert_eq!(s.terminal_frequencies, vec![1.0]);
        }
    }

    #[test]
    fn same_seed_same_summary() {
        let sys = desk();
        let grid = make_grid(1.0, 40, GridScheme::UniformT, 1e-3).unwrap();
        let a = run_ensemble(&sys, &unit(), &grid, 150, 11, Route::Exact).unwrap();
        let b = run_ensemble(&sys, &unit(), &grid, 150, 11, Route::Exact).unwrap();
        assert_eq!(a.mean_h, b.mean_h);
        assert_eq!(a.se_v, b.se_v);
        assert_eq!(a.terminal_counts, b.terminal_counts);
        for row in &a.mean_pi {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert_eq!(a.terminal_frequencies.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn single_path_summary_equals_path() {
        let sys = desk();
        let grid = make_grid(1.0, 20, GridScheme::UniformT, 1e-3).unwrap();
        let s = run_ensemble(&sys, &unit(), &grid, 1, 5, Route::Exact).unwrap();
        let (_, red) = exact_path(&sys, &unit(), &grid, SeedSpec::new(5, 0), BridgeConstruction::Exact).unwrap();
        assert_eq!(s.mean_h, red.energy);
        assert_eq!(s.mean_v, red.variance);
        assert!(s.se_h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn thread_count_does_not_change_summary() {
        let sys = desk();
        let grid = make_grid(1.0, 30, GridScheme::UniformT, 1e-3).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_ensemble(&sys, &unit(), &grid, 300, 2, Route::Sde).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.mean_h, b.mean_h);
        assert_eq!(a.se_pi, b.se_pi);
    }

    #[test]
    fn sde_route_rejects_sentinel() {
        let grid = make_grid(1.0, 10, GridScheme::UniformT, 1e-3).unwrap().with_sentinel();
        assert!(run_ensemble(&desk(), &unit(), &grid, 2, 0, Route::Sde).is_err());
        assert!(run_ensemble(&desk(), &unit(), &grid.without_sentinel(), 0, 0, Route::Sde).is_err());
    }

    #[test]
    fn born_test_thresholds() {
        let mut s1 = synthetic(vec![0.7; 3], vec![0.0; 3], vec![1.0], 10);
        s1.born_weights = vec![1.0];
        assert!(born_test(&s1, &single()).passed);

        let n = 10_000;
        let exact = synthetic(vec![0.7; 3], vec![0.01; 3], vec![0.3, 0.7], n);
        assert!(born_test(&exact, &desk()).passed);
        let off = 10.0 * (0.21f64 / n as f64).sqrt();
        let bad = synthetic(vec![0.7; 3], vec![0.01; 3], vec![0.3 - off, 0.7 + off], n);
        let entry = born_test(&bad, &desk());
        assert!(!entry.passed);
        assert!((entry.statistic - 10.0).abs() < 1e-9);
    }

    #[test]
    fn martingale_test_detects_drift() {
        let se = 0.01;
        let flat = synthetic(vec![0.7; 20], vec![se; 20], vec![0.3, 0.7], 100);
        assert!(martingale_test(&flat).iter().all(|e| e.passed));
        let drift = (0..20).map(|k| 0.7 + 10.0 * se * k as f64 / 19.0).collect();
        let bad = synthetic(drift, vec![se; 20], vec![0.3, 0.7], 100);
        let entries = martingale_test(&bad);
        assert!(!entries[0].passed);
        assert!(entries[1].passed);
    }

    #[test]
    fn variance_test_on_single_level() {
        let sys = single();
        let grid = make_grid(1.0, 30, GridScheme::UniformT, 1e-3).unwrap().with_sentinel();
        let s = run_ensemble(&sys, &unit(), &grid, 10, 1, Route::Exact).unwrap();
        let entries = variance_decay_test(&s, 1.0, 1.0);
        assert!(entries.iter().all(|e| e.passed));
        assert!(entries.iter().any(|e| e.name == "variance_terminal"));
    }

    #[test]
    fn independence_on_single_level_is_exactly_zero() {
        let sys = single();
        let grid = make_grid(1.0, 16, GridScheme::UniformT, 1e-3).unwrap();
        let s = run_ensemble(&sys, &unit(), &grid, 50, 4, Route::Exact).unwrap();
        let entries = independence_test(&s, 1.0).unwrap();
        assert_eq!(entries[0].statistic, 0.0);
        let (cov, se) = covariance_with_se(&s.covariance_samples[1].beta, &s.covariance_samples[1].terminal_energy);
        assert_eq!((cov, se), (0.0, 0.0));
    }

    #[test]
    fn covariance_matches_direct_formula() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y = [0.5, -1.0, 3.0, 2.0];
        let mx = x.iter().sum::<f64>() / 4.0;
        let my = y.iter().sum::<f64>() / 4.0;
        let direct: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / 3.0;
        assert!((covariance_with_se(&x, &y).0 - direct).abs() < 1e-14);
    }

    #[test]
    fn convergence_rejects_non_nested_counts() {
        let mut cfg = ConvergenceConfig::desk(2, 0);
        cfg.step_counts = vec![100, 150];
        assert!(matches!(
            convergence_test(&desk(), &unit(), &cfg),
            Err(Error::Config { field, .. }) if field == "convergence.step_counts"
        ));
    }

    #[test]
    fn convergence_on_single_level_has_zero_gaps() {
        let mut cfg = ConvergenceConfig::desk(4, 0);
        cfg.step_counts = vec![16, 64, 256];
        let study = convergence_test(&single(), &unit(), &cfg).unwrap();
        assert_eq!(study.rms_energy_gaps, vec![0.0; 3]);
        assert!(
            study
                .entries()
                .iter()
                .find(|e| e.name == "convergence_monotone")
                .unwrap()
                .passed
        );
    }

    #[test]
    fn entry_verdict_follows_comparison() {
        assert!(TestEntry::new("a", 1.0, 1.0, Comparison::AtMost, json!({})).passed);
        assert!(!TestEntry::new("a", 1.0, 1.0, Comparison::Below, json!({})).passed);
        assert!(TestEntry::new("a", 1.0, 1.0, Comparison::AtLeast, json!({})).passed);
    }
}
