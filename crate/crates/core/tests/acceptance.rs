//! Acceptance suite on the two-level desk system: E = (0, 1),
//! π = (0.3, 0.7), σ = T = 1, grids ending at 0.999 T, exact route.
//!
//! Every criterion writes one `PASS`/`FAIL` line straight to stderr, which
//! the test harness does not capture, and then asserts its verdict.

use std::io::Write;
use std::time::Instant;

use collapse_core::cli;
use collapse_core::exact::{bayes_probabilities, conditional_probabilities, ReductionSchedule};
use collapse_core::kernels::{make_grid, sample_bridge_exact, GridScheme, SeedSpec, TimeGrid};
use collapse_core::statistics::{
    born_test, convergence_test, covariance_with_se, independence_test, integral_form_test, martingale_test,
    run_ensemble, run_ensemble_with, variance_decay_test, ConvergenceConfig, EnsembleOptions, EnsembleSummary, Route,
};
use collapse_core::system::{build_system, reduction_timescale, QuantumSystem};
use collapse_core::timechange::relative_gap;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::sync::OnceLock;

const SEED: u64 = 20261018;

fn desk() -> QuantumSystem {
    build_system(
        &[0.0, 1.0],
        &[C64::new(0.3f64.sqrt(), 0.0), C64::new(0.7f64.sqrt(), 0.0)],
        1e-9,
    )
    .unwrap()
}

fn unit() -> ReductionSchedule {
    ReductionSchedule::new(1.0, 1.0).unwrap()
}

fn report(criterion: u32, title: &str, passed: bool, detail: &str, started: Instant, budget_s: f64) {
    let line = format!(
        "\ncriterion {criterion:>2} {} {title}: {detail} [{:.2} s, budget {budget_s} s]\n",
        if passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// 10⁴ exact-route paths on a 1000-step grid closed by a sentinel at T,
/// shared by criteria 2 to 5.
fn desk_ensemble() -> &'static (EnsembleSummary, f64) {
    static CELL: OnceLock<(EnsembleSummary, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let grid = make_grid(1.0, 1000, GridScheme::UniformT, 1e-3)
            .unwrap()
            .with_sentinel();
        let summary = run_ensemble(&desk(), &unit(), &grid, 10_000, SEED, Route::Exact).unwrap();
        (summary, started.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_01_reduction_timescale() {
    let started = Instant::now();
    let value = reduction_timescale(2.8).unwrap();
    let rel = (value - 1.0).abs();
    let passed = rel <= 1e-15;
    report(
        1,
        "reduction timescale",
        passed,
        &format!("τ_R(2.8 MeV) = {value} s, rel. error {rel:e}"),
        started,
        0.1,
    );
    assert!(passed);
}

#[test]
fn criterion_02_born_law() {
    let started = Instant::now();
    let (summary, build_s) = desk_ensemble();
    let freq = summary.terminal_frequencies[1];
    let band = 4.0 * (0.21f64 / 10_000.0).sqrt();
    let entry = born_test(summary, &desk());
    let passed = (freq - 0.7).abs() <= band && entry.passed;
    report(
        2,
        "Born law",
        passed,
        &format!("freq(E = 1) = {freq}, band 0.7 ± {band:.4}, ensemble {build_s:.2} s"),
        started,
        10.0,
    );
    assert!(passed);
}

#[test]
fn criterion_03_energy_martingale() {
    let started = Instant::now();
    let (summary, _) = desk_ensemble();
    let probes = summary.grid.len();
    let worst = (0..probes)
        .map(|k| (summary.mean_h[k] - 0.7).abs() / summary.se_h[k].max(collapse_core::statistics::SE_FLOOR))
        .fold(0.0, f64::max);
    let entry = &martingale_test(summary)[0];
    let passed = probes >= 100 && worst <= 4.0 && entry.passed;
    report(
        3,
        "energy martingale",
        passed,
        &format!("max |mean H_t − 0.7|/SE = {worst:.3} over {probes} times"),
        started,
        10.0,
    );
    assert!(passed);
}

#[test]
fn criterion_04_probability_martingale() {
    let started = Instant::now();
    let (summary, _) = desk_ensemble();
    let worst = (0..summary.grid.len())
        .map(|k| (summary.mean_pi[k][1] - 0.7).abs() / summary.se_pi[k][1].max(collapse_core::statistics::SE_FLOOR))
        .fold(0.0, f64::max);
    let entry = &martingale_test(summary)[1];
    let passed = worst <= 4.0 && entry.passed;
    report(
        4,
        "probability martingale",
        passed,
        &format!("max |mean π_1t − 0.7|/SE = {worst:.3}"),
        started,
        10.0,
    );
    assert!(passed);
}

#[test]
fn criterion_05_variance_collapse() {
    let started = Instant::now();
    let (summary, _) = desk_ensemble();
    let entries = variance_decay_test(summary, 1.0, 1.0);
    let get = |name: &str| entries.iter().find(|e| e.name == name).unwrap();
    let ceiling = get("variance_ceiling");
    let terminal = get("variance_terminal");
    let late = get("variance_late_decay");
    let passed = ceiling.passed && terminal.passed && late.passed;
    report(
        5,
        "variance collapse",
        passed,
        &format!(
            "ceiling z = {:.3}, V at sentinel = {:e}, V(0.999 t_max)/V(0.5 t_max) = {:.3e}",
            ceiling.statistic, terminal.statistic, late.statistic
        ),
        started,
        10.0,
    );
    assert!(passed);
}

#[test]
fn criterion_06_bayes_equals_softmax() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let levels = rng.random_range(1..=5);
        let energies: Vec<f64> = (0..levels).map(|_| rng.random_range(-3.0..3.0)).collect();
        let amplitudes: Vec<C64> = (0..levels)
            .map(|_| C64::new(rng.random_range(0.05..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let Ok(system) = build_system(&energies, &amplitudes, 1e-9) else {
            continue;
        };
        let horizon = rng.random_range(0.5..2.0);
        let schedule = ReductionSchedule::new(horizon, rng.random_range(0.2..2.0)).unwrap();
        let t = rng.random_range(0.0..0.99) * horizon;
        // ξ_t within six standard deviations of σ t E_k for a random level k.
        let k = rng.random_range(0..system.num_levels());
        let sd = (t * (horizon - t) / horizon).sqrt();
        let xi = schedule.sigma() * t * system.energies()[k] + rng.random_range(-6.0..6.0) * sd;
        let a = conditional_probabilities(xi, t, &system, &schedule).unwrap();
        let b = bayes_probabilities(xi, t, &system, &schedule).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max(relative_gap(*x, *y));
        }
    }
    let passed = worst <= 1e-12;
    report(
        6,
        "Bayes route equals softmax route",
        passed,
        &format!("max relative gap {worst:e} over 10³ triples"),
        started,
        1.0,
    );
    assert!(passed);
}

#[test]
fn criterion_07_time_change_identity() {
    let started = Instant::now();
    let config = cli::RunConfig::from_json(include_str!("../../../configs/desk.json")).unwrap();
    let prepared = config.prepare().unwrap();
    let study = cli::equivalence_study(&prepared, &prepared.grid, 100, SEED, false).unwrap();
    let passed = study.max_eta_gap <= 1e-10 && study.max_prob_gap <= 1e-12;
    report(
        7,
        "time-change identity",
        passed,
        &format!(
            "max η gap {:e}, max relative probability gap {:e}, 100 paths",
            study.max_eta_gap, study.max_prob_gap
        ),
        started,
        5.0,
    );
    assert!(passed);
}

/// Criteria 8 and 9 share one study.
fn convergence_entries() -> &'static (collapse_core::statistics::ConvergenceStudy, f64) {
    static CELL: OnceLock<(collapse_core::statistics::ConvergenceStudy, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let study = convergence_test(&desk(), &unit(), &ConvergenceConfig::desk(1000, SEED)).unwrap();
        (study, started.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_08_route_consistency() {
    let started = Instant::now();
    let (study, build_s) = convergence_entries();
    let entries = study.entries();
    let monotone = entries
        .iter()
        .find(|e| e.name == "convergence_monotone")
        .unwrap()
        .passed;
    let finest = entries.iter().find(|e| e.name == "convergence_finest_gap").unwrap();
    let passed = monotone && finest.passed;
    report(
        8,
        "SDE vs exact route",
        passed,
        &format!(
            "RMS gaps {:?} at steps {:?}, ratios {:?}, strictly decreasing: {monotone}, finest < {}: {}, \
             agreement {:?}, study {build_s:.2} s",
            study.rms_energy_gaps,
            study.step_counts,
            study.gap_ratios,
            study.bound,
            finest.passed,
            study.classification_agreement
        ),
        started,
        60.0,
    );
    assert!(passed);
}

#[test]
fn criterion_09_norm_preservation() {
    let started = Instant::now();
    let (study, _) = convergence_entries();
    let max_err = study.max_norm_error.iter().copied().fold(0.0, f64::max);
    let drift_decreasing = study.raw_norm_drift.windows(2).all(|w| w[1] < w[0]);
    let passed = max_err <= 1e-12 && drift_decreasing;
    report(
        9,
        "norm preservation",
        passed,
        &format!(
            "max |‖ψ‖ − 1| renormalized {max_err:e}; raw per-step drift {:?}",
            study.raw_norm_drift
        ),
        started,
        60.0,
    );
    assert!(passed);
}

#[test]
fn criterion_10_bridge_statistics() {
    let started = Instant::now();
    let grid = TimeGrid::from_times(1.0, vec![0.0, 0.25, 0.5, 0.75]).unwrap();
    let n = 100_000;
    let mut b25 = Vec::with_capacity(n);
    let mut b50 = Vec::with_capacity(n);
    let mut b75 = Vec::with_capacity(n);
    for i in 0..n {
        let bridge = sample_bridge_exact(&grid, 1.0, SeedSpec::new(SEED, i as u64)).unwrap();
        b25.push(bridge.values()[1]);
        b50.push(bridge.values()[2]);
        b75.push(bridge.values()[3]);
    }
    let (var, _) = covariance_with_se(&b50, &b50);
    let (cov, _) = covariance_with_se(&b25, &b75);
    let var_rel = (var - 0.25).abs() / 0.25;
    let cov_rel = (cov - 0.0625).abs() / 0.0625;
    let passed = var_rel <= 0.05 && cov_rel <= 0.10;
    report(
        10,
        "bridge statistics",
        passed,
        &format!("Var(β_0.5) = {var:.5} (rel {var_rel:.4}), Cov(β_0.25, β_0.75) = {cov:.5} (rel {cov_rel:.4})"),
        started,
        10.0,
    );
    assert!(passed);
}

#[test]
fn criterion_11_independence() {
    let started = Instant::now();
    let grid = TimeGrid::from_times(1.0, vec![0.0, 0.25, 0.5, 0.75, 0.999]).unwrap();
    let options = EnsembleOptions { probe_times: vec![0.5] };
    let summary = run_ensemble_with(&desk(), &unit(), &grid, 100_000, SEED, Route::Exact, &options).unwrap();
    let entries = independence_test(&summary, 1.0).unwrap();
    let independence = &entries[0];
    let passed = independence.passed;
    report(
        11,
        "independence of β_T/2 and H_T",
        passed,
        &format!("|Cov|/SE = {:.3} over 10⁵ paths", independence.statistic),
        started,
        20.0,
    );
    assert!(passed);
}

#[test]
fn criterion_12_integral_form() {
    let started = Instant::now();
    let grid = make_grid(1.0, 1 << 14, GridScheme::UniformT, 1e-3).unwrap();
    let tolerance = ConvergenceConfig::desk(1, SEED).bound;
    let entry = integral_form_test(&desk(), &unit(), &grid, 100, SEED, tolerance).unwrap();
    report(
        12,
        "integral form vs SDE",
        entry.passed,
        &format!(
            "RMS ‖ψ_int − ψ_sde‖ = {:e} (tolerance {tolerance}), 100 paths",
            entry.statistic
        ),
        started,
        30.0,
    );
    assert!(entry.passed);
}

#[test]
fn criterion_13_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("desk.json");
    let mut config = cli::RunConfig::from_json(include_str!("../../../configs/desk.json")).unwrap();
    config.ensemble.n_paths = 2000;
    std::fs::write(&config_path, serde_json::to_vec(&config).unwrap()).unwrap();
    let run = |tag: &str, threads: &str| {
        let out = dir.path().join(tag);
        let code = cli::run([
            "collapse",
            "ensemble",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(code, cli::EXIT_PASS);
        std::fs::read(out.join("summary.csv")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "4");
    let c = run("c", "1");
    let passed = a == b && a == c;
    report(
        13,
        "determinism",
        passed,
        &format!(
            "summary.csv byte-identical across runs and 1 vs 4 threads: {passed} ({} bytes)",
            a.len()
        ),
        started,
        20.0,
    );
    assert!(passed);
}
