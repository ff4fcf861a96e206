//! Direct numerical route: explicit Euler–Maruyama for
//!
//! ```text
//! dψ = −iĤψ dt − ⅛σ_t²(Ĥ − H_t)²ψ dt + ½σ_t(Ĥ − H_t)ψ dW_t
//! ```
//!
//! and the integral form `ψ_t = Û_t M̂_t^{1/2} ψ_0` driven by the same noise.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::exact::{log_sum_exp, ReductionPath, ReductionSchedule};
use crate::kernels::{NoiseKind, NoisePath, TimeGrid};
use crate::system::{weighted_moments, QuantumSystem};

#[derive(Clone, Debug)]
pub struct IntegratorConfig {
    grid: TimeGrid,
    renormalize: bool,
    schedule: ReductionSchedule,
}

impl IntegratorConfig {
    /// Renormalization after every step is on by default.
    pub fn new(grid: TimeGrid, schedule: ReductionSchedule) -> Result<Self> {
        if grid.horizon() != schedule.horizon() {
            return Err(Error::config(
                "grid",
                format!(
                    "grid horizon {} differs from schedule horizon {}",
                    grid.horizon(),
                    schedule.horizon()
                ),
            ));
        }
        if grid.has_sentinel() {
            return Err(Error::config("grid", "cannot integrate up to t = T"));
        }
        Ok(Self {
            grid,
            renormalize: true,
            schedule,
        })
    }

    pub fn with_renormalization(mut self, renormalize: bool) -> Self {
        self.renormalize = renormalize;
        self
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn renormalize(&self) -> bool {
        self.renormalize
    }

    pub fn schedule(&self) -> &ReductionSchedule {
        &self.schedule
    }
}

fn energy_expectation(amplitudes: &[C64], system: &QuantumSystem) -> f64 {
    let spectrum = system.spectrum();
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (j, a) in amplitudes.iter().enumerate() {
        let p = a.norm_sqr();
        weighted += p * spectrum.energy(spectrum.level_of(j));
        total += p;
    }
    weighted / total
}

/// Level populations `Σ_{j ∈ level} |ψ_j|² / ‖ψ‖²`.
pub fn level_probabilities(amplitudes: &[C64], system: &QuantumSystem) -> Vec<f64> {
    let spectrum = system.spectrum();
    let mut p = vec![0.0; spectrum.num_levels()];
    let mut total = 0.0;
    for (j, a) in amplitudes.iter().enumerate() {
        let m = a.norm_sqr();
        p[spectrum.level_of(j)] += m;
        total += m;
    }
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// One explicit step from `t` to `t + dt` with noise increment `dw`. The
/// energy `H_t` is taken from the pre-step amplitudes.
pub fn euler_step(
    amplitudes: &[C64],
    t: f64,
    dt: f64,
    dw: f64,
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
    renormalize: bool,
) -> Result<Vec<C64>> {
    if !(dt >= 0.0) || !(t + dt < schedule.horizon()) {
        return Err(Error::Domain(format!(
            "step [{t}, {}] reaches the horizon T = {}",
            t + dt,
            schedule.horizon()
        )));
    }
    let mut next = amplitudes.to_vec();
    euler_step_in_place(&mut next, dt, dw, system, schedule.sigma_at(t)?, renormalize);
    Ok(next)
}

fn euler_step_in_place(psi: &mut [C64], dt: f64, dw: f64, system: &QuantumSystem, sigma_t: f64, renormalize: bool) {
    let h = energy_expectation(psi, system);
    let spectrum = system.spectrum();
    for (j, a) in psi.iter_mut().enumerate() {
        let e = spectrum.energy(spectrum.level_of(j));
        let d = e - h;
        let drift = C64::new(-0.125 * sigma_t * sigma_t * d * d, -e) * dt;
        let diffusion = 0.5 * sigma_t * d * dw;
        *a += *a * drift + *a * diffusion;
    }
    if renormalize {
        let n = crate::system::norm(psi);
        psi.iter_mut().for_each(|a| *a /= n);
    }
}

fn record(path: &mut ReductionPath, psi: &[C64], system: &QuantumSystem) {
    let p = level_probabilities(psi, system);
    let (h, v) = weighted_moments(&p, system.energies());
    path.probabilities.push(p);
    path.energy.push(h);
    path.variance.push(v);
    path.amplitudes.push(psi.to_vec());
}

/// Integrates from the initial state along the driving noise, recording the
/// state and its energy statistics at every grid time.
///
/// Amplitudes are stored as computed, so with renormalization off their norm
/// exposes the discretization drift.
pub fn integrate_sde(
    system: &QuantumSystem,
    driving_noise: &NoisePath,
    config: &IntegratorConfig,
) -> Result<ReductionPath> {
    if driving_noise.grid() != &config.grid {
        return Err(Error::GridMismatch(
            "driving noise is not on the integrator grid".into(),
        ));
    }
    let times = config.grid.times();
    let noise = driving_noise.values();
    let mut path = ReductionPath {
        grid: config.grid.clone(),
        probabilities: Vec::with_capacity(times.len()),
        energy: Vec::with_capacity(times.len()),
        variance: Vec::with_capacity(times.len()),
        amplitudes: Vec::with_capacity(times.len()),
    };
    let mut psi = system.initial().amplitudes().to_vec();
    record(&mut path, &psi, system);
    for k in 0..times.len() - 1 {
        let t = times[k];
        let sigma_t = config.schedule.sigma_at(t)?;
        euler_step_in_place(
            &mut psi,
            times[k + 1] - t,
            noise[k + 1] - noise[k],
            system,
            sigma_t,
            config.renormalize,
        );
        record(&mut path, &psi, system);
    }
    Ok(path)
}

/// Terminal state only, without storing the trajectory.
pub fn integrate_sde_terminal(
    system: &QuantumSystem,
    driving_noise: &NoisePath,
    config: &IntegratorConfig,
) -> Result<Vec<C64>> {
    if driving_noise.grid() != &config.grid {
        return Err(Error::GridMismatch(
            "driving noise is not on the integrator grid".into(),
        ));
    }
    let times = config.grid.times();
    let noise = driving_noise.values();
    let mut psi = system.initial().amplitudes().to_vec();
    for k in 0..times.len() - 1 {
        let t = times[k];
        let sigma_t = config.schedule.sigma_at(t)?;
        euler_step_in_place(
            &mut psi,
            times[k + 1] - t,
            noise[k + 1] - noise[k],
            system,
            sigma_t,
            config.renormalize,
        );
    }
    Ok(psi)
}

/// `W*_t = W_t + ∫₀ᵗ σ_s H_s ds`, left-point quadrature.
pub fn drifted_noise(
    driving_noise: &NoisePath,
    energy_path: &[f64],
    schedule: &ReductionSchedule,
) -> Result<NoisePath> {
    let grid = driving_noise.grid();
    if energy_path.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} energies on a {}-point grid",
            energy_path.len(),
            grid.len()
        )));
    }
    let times = grid.times();
    let w = driving_noise.values();
    let mut values = Vec::with_capacity(times.len());
    values.push(w[0]);
    let mut drift = 0.0;
    for k in 1..times.len() {
        let s = times[k - 1];
        drift += schedule.sigma_at(s)? * energy_path[k - 1] * (times[k] - s);
        values.push(w[k] + drift);
    }
    NoisePath::new(grid.clone(), values, NoiseKind::Drifted)
}

/// Running integrals behind `M̂_t`:
/// `∫σ_s dW*_s = ∫σ_s (dW_s + σ_s H_s ds)` and `∫σ_s² ds`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegralFormState {
    pub t: f64,
    pub drifted_integral: f64,
    pub variance_integral: f64,
}

impl IntegralFormState {
    pub fn start() -> Self {
        Self {
            t: 0.0,
            drifted_integral: 0.0,
            variance_integral: 0.0,
        }
    }

    /// Accumulates one left-point step.
    pub fn advance(&mut self, dt: f64, dw: f64, energy: f64, schedule: &ReductionSchedule) -> Result<()> {
        let sigma_t = schedule.sigma_at(self.t)?;
        self.drifted_integral += sigma_t * (dw + sigma_t * energy * dt);
        self.variance_integral += sigma_t * sigma_t * dt;
        self.t += dt;
        Ok(())
    }

    /// Per-level exponent `E_i ∫σ dW* − ½E_i² ∫σ² ds` of `M̂_t` before normalization.
    pub fn log_weights(&self, system: &QuantumSystem) -> Vec<f64> {
        system
            .energies()
            .iter()
            .map(|&e| e * self.drifted_integral - 0.5 * e * e * self.variance_integral)
            .collect()
    }

    /// `ln Φ_t = ln Σ_i π_i exp(log_weight_i)`: the normalization that keeps
    /// `⟨ψ_0|M̂_t|ψ_0⟩ = 1`.
    pub fn log_normalization(&self, system: &QuantumSystem) -> f64 {
        let terms: Vec<f64> = self
            .log_weights(system)
            .iter()
            .zip(system.born_weights())
            .map(|(lw, &p)| if p == 0.0 { f64::NEG_INFINITY } else { p.ln() + lw })
            .collect();
        log_sum_exp(&terms)
    }

    /// `Û_t M̂_t^{1/2} |ψ_0⟩`, renormalized to absorb rounding.
    pub fn state(&self, system: &QuantumSystem) -> Vec<C64> {
        let log_phi = self.log_normalization(system);
        let log_w = self.log_weights(system);
        let spectrum = system.spectrum();
        let mut psi: Vec<C64> = system
            .initial()
            .amplitudes()
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                let level = spectrum.level_of(j);
                let modulus = (0.5 * (log_w[level] - log_phi)).exp();
                a * C64::from_polar(modulus, -spectrum.energy(level) * self.t)
            })
            .collect();
        let n = crate::system::norm(&psi);
        psi.iter_mut().for_each(|a| *a /= n);
        psi
    }
}

/// State at the last grid time from the integral form, given the driving
/// noise and the energy path `H_s` of the solution on the same grid.
pub fn integral_form_state(
    driving_noise: &NoisePath,
    energy_path: &[f64],
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
) -> Result<Vec<C64>> {
    let grid = driving_noise.grid();
    if energy_path.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} energies on a {}-point grid",
            energy_path.len(),
            grid.len()
        )));
    }
    if grid.horizon() != schedule.horizon() {
        return Err(Error::GridMismatch("noise grid horizon differs from schedule".into()));
    }
    let times = grid.times();
    let w = driving_noise.values();
    let mut state = IntegralFormState::start();
    for k in 0..times.len() - 1 {
        state.advance(times[k + 1] - times[k], w[k + 1] - w[k], energy_path[k], schedule)?;
    }
    state.t = times[times.len() - 1];
    Ok(state.state(system))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_grid, sample_brownian, GridScheme, SeedSpec};
    use crate::system::{build_system, norm};

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn desk() -> QuantumSystem {
        build_system(&[0.0, 1.0], &[c(0.3f64.sqrt()), c(0.7f64.sqrt())], 1e-9).unwrap()
    }

    fn unit() -> ReductionSchedule {
        ReductionSchedule::new(1.0, 1.0).unwrap()
    }

    #[test]
    fn single_level_step_is_pure_phase() {
        let sys = build_system(&[2.0], &[C64::new(0.6, 0.8)], 1e-9).unwrap();
        let next = euler_step(sys.initial().amplitudes(), 0.2, 1e-3, 0.37, &sys, &unit(), false).unwrap();
        let expected = C64::new(0.6, 0.8) * C64::new(1.0, -2.0e-3);
        assert!((next[0] - expected).norm() < 1e-16);
        let renorm = euler_step(sys.initial().amplitudes(), 0.2, 1e-3, 0.37, &sys, &unit(), true).unwrap();
        assert!((norm(&renorm) - 1.0).abs() < 1e-15);
        assert!((renorm[0].arg() - (0.8f64.atan2(0.6) - 2.0e-3f64.atan())).abs() < 1e-15);
    }

    #[test]
    fn zero_step_is_identity() {
        let sys = desk();
        let psi = sys.initial().amplitudes();
        assert_eq!(euler_step(psi, 0.4, 0.0, 0.0, &sys, &unit(), false).unwrap(), psi);
    }

    #[test]
    fn step_matches_scalar_recomputation() {
        let sys = desk();
        let (dt, dw, t) = (1e-4, 0.01, 0.25);
        let next = euler_step(sys.initial().amplitudes(), t, dt, dw, &sys, &unit(), false).unwrap();
        // Hand-expanded update for the two amplitudes.
        let (a0, a1) = (0.3f64.sqrt(), 0.7f64.sqrt());
        let h = 0.7;
        let s = 1.0 / (1.0 - t);
        let f = |a: f64, e: f64| {
            let d = e - h;
            let re = a + a * (-s * s * d * d / 8.0) * dt + a * 0.5 * s * d * dw;
            let im = -a * e * dt;
            C64::new(re, im)
        };
        assert!((next[0] - f(a0, 0.0)).norm() < 1e-15);
        assert!((next[1] - f(a1, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn step_to_horizon_fails() {
        let sys = desk();
        assert!(matches!(
            euler_step(sys.initial().amplitudes(), 0.9, 0.1, 0.0, &sys, &unit(), true),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn config_rejects_sentinel_and_mismatch() {
        let g = make_grid(1.0, 8, GridScheme::UniformT, 0.1).unwrap();
        assert!(IntegratorConfig::new(g.with_sentinel(), unit()).is_err());
        assert!(IntegratorConfig::new(g, ReductionSchedule::new(2.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn zero_noise_single_level_keeps_probability() {
        let sys = build_system(&[1.5], &[c(1.0)], 1e-9).unwrap();
        let g = make_grid(1.0, 100, GridScheme::UniformT, 0.01).unwrap();
        let w = NoisePath::new(g.clone(), vec![0.0; g.len()], NoiseKind::Brownian).unwrap();
        let path = integrate_sde(&sys, &w, &IntegratorConfig::new(g, unit()).unwrap()).unwrap();
        assert!(path.probabilities.iter().all(|p| p == &[1.0]));
        assert!(path.variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn renormalized_norm_stays_at_one() {
        let sys = desk();
        let g = make_grid(1.0, 512, GridScheme::UniformTau, 1e-3).unwrap();
        let cfg = IntegratorConfig::new(g.clone(), unit()).unwrap();
        for i in 0..5 {
            let w = sample_brownian(&g, SeedSpec::new(1, i));
            let path = integrate_sde(&sys, &w, &cfg).unwrap();
            for psi in &path.amplitudes {
                assert!((norm(psi) - 1.0).abs() <= 1e-12);
            }
            assert_eq!(
                path.amplitudes.last().unwrap(),
                &integrate_sde_terminal(&sys, &w, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn integral_form_empty_and_single_level() {
        let sys = desk();
        let g = TimeGrid::from_times(1.0, vec![0.0, 0.1]).unwrap();
        let w = NoisePath::new(g.clone(), vec![0.0, 0.0], NoiseKind::Reconstructed).unwrap();
        let st = IntegralFormState::start();
        let psi0 = st.state(&sys);
        for (a, b) in psi0.iter().zip(sys.initial().amplitudes()) {
            assert!((a - b).norm() < 1e-15);
        }
        assert!(integral_form_state(&w, &[0.7], &sys, &unit()).is_err());

        let single = build_system(&[3.0], &[C64::new(0.0, 1.0)], 1e-9).unwrap();
        let g = make_grid(1.0, 64, GridScheme::UniformT, 0.05).unwrap();
        let noise = sample_brownian(&g, SeedSpec::new(4, 4));
        let h = vec![3.0; g.len()];
        let psi = integral_form_state(&noise, &h, &single, &unit()).unwrap();
        let expected = C64::new(0.0, 1.0) * C64::from_polar(1.0, -3.0 * g.t_max());
        assert!((psi[0] - expected).norm() < 1e-12);
    }

    #[test]
    fn integral_normalization_matches_weights() {
        let sys = desk();
        let st = IntegralFormState {
            t: 0.5,
            drifted_integral: 1.3,
            variance_integral: 2.0,
        };
        let direct = (0.3f64 + 0.7 * (1.3f64 - 1.0).exp()).ln();
        assert!((st.log_normalization(&sys) - direct).abs() < 1e-15);
    }

    #[test]
    fn drifted_noise_adds_energy_drift() {
        let g = TimeGrid::from_times(1.0, vec![0.0, 0.5, 0.75]).unwrap();
        let w = NoisePath::new(g, vec![0.0, 0.1, 0.2], NoiseKind::Reconstructed).unwrap();
        let star = drifted_noise(&w, &[1.0, 2.0, 0.0], &unit()).unwrap();
        // σ_0 H_0 · 0.5 = 0.5, σ_{0.5} H_{0.5} · 0.25 = 2·2·0.25 = 1.
        assert!((star.values()[1] - 0.6).abs() < 1e-15);
        assert!((star.values()[2] - 1.7).abs() < 1e-15);
        assert_eq!(star.kind(), NoiseKind::Drifted);
    }
}
