//! The clock `τ(t) = tT/(T − t)` linking finite-horizon reduction on `[0, T)`
//! to asymptotic reduction on `[0, ∞)`.
//!
//! Under this clock the information process becomes `η_τ = (1 + τ/T) ξ_t`,
//! which equals `σ τ H_T + B̃_τ` with `B̃_τ = ∫₀ᵗ T/(T − s) dB_s` a standard
//! Brownian motion in `τ`. On a grid both sides are built from the same
//! increments `ΔB`, so the identity holds to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{softmax_in_place, InformationPath, ReductionPath};
use crate::kernels::{GridScheme, NoisePath};
use crate::system::QuantumSystem;

pub fn tau_of_t(t: f64, horizon: f64) -> Result<f64> {
    if !(t >= 0.0 && t < horizon) {
        return Err(Error::Domain(format!("t = {t} outside [0, {horizon})")));
    }
    Ok(t * horizon / (horizon - t))
}

pub fn t_of_tau(tau: f64, horizon: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("negative clock value {tau}")));
    }
    if tau.is_infinite() {
        return Ok(horizon);
    }
    Ok(tau * horizon / (tau + horizon))
}

/// Brownian motion on the asymptotic clock, sampled at `τ_k = τ(t_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FastForwardedBm {
    pub tau: Vec<f64>,
    pub values: Vec<f64>,
}

/// `B̃_{τ_k} = Σ_{j<k} T/(T − t_j) ΔB_j`.
pub fn fast_forward_bm(bm: &NoisePath, horizon: f64) -> Result<FastForwardedBm> {
    let grid = bm.grid();
    if grid.horizon() != horizon {
        return Err(Error::Domain(format!(
            "path horizon {} differs from {horizon}",
            grid.horizon()
        )));
    }
    fast_forward_values(grid.times(), bm.values(), horizon)
}

fn fast_forward_values(times: &[f64], b: &[f64], horizon: f64) -> Result<FastForwardedBm> {
    let tau = times
        .iter()
        .map(|&t| tau_of_t(t, horizon))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(times.len());
    values.push(0.0);
    let mut acc = 0.0;
    for k in 1..times.len() {
        acc += horizon / (horizon - times[k - 1]) * (b[k] - b[k - 1]);
        values.push(acc);
    }
    Ok(FastForwardedBm { tau, values })
}

/// `η_τ` for the asymptotic model together with its driving `B̃_τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AsymptoticPath {
    pub tau: Vec<f64>,
    pub eta: Vec<f64>,
    pub bm_tilde: Vec<f64>,
}

/// `η_τ = σ τ E_k + B̃_τ`.
pub fn asymptotic_information(
    terminal_level: usize,
    bm_tilde: &FastForwardedBm,
    sigma: f64,
    system: &QuantumSystem,
) -> Result<AsymptoticPath> {
    if terminal_level >= system.num_levels() {
        return Err(Error::Domain(format!("no level {terminal_level}")));
    }
    if bm_tilde.tau.len() != bm_tilde.values.len() {
        return Err(Error::GridMismatch("clock and values differ in length".into()));
    }
    let drift = sigma * system.energies()[terminal_level];
    let eta = bm_tilde
        .tau
        .iter()
        .zip(&bm_tilde.values)
        .map(|(&tau, &b)| drift * tau + b)
        .collect();
    Ok(AsymptoticPath {
        tau: bm_tilde.tau.clone(),
        eta,
        bm_tilde: bm_tilde.values.clone(),
    })
}

/// `π_iτ ∝ π_i exp(σ E_i η − ½σ² E_i² τ)`.
pub fn asymptotic_probabilities(eta: f64, tau: f64, system: &QuantumSystem, sigma: f64) -> Result<Vec<f64>> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!(
            "clock value {tau} must be finite and nonnegative"
        )));
    }
    let mut log_w: Vec<f64> = system
        .born_weights()
        .iter()
        .zip(system.energies())
        .map(|(&p, &e)| {
            if p == 0.0 {
                f64::NEG_INFINITY
            } else {
                p.ln() + sigma * e * eta - 0.5 * sigma * sigma * e * e * tau
            }
        })
        .collect();
    softmax_in_place(&mut log_w);
    Ok(log_w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub horizon: f64,
    pub n_points: usize,
    pub t_max: f64,
    pub tau_max: f64,
    pub scheme: GridScheme,
    pub epsilon_fraction: f64,
}

/// Largest discrepancies between the finite-horizon and asymptotic
/// descriptions of one path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `max_k |(1 + τ_k/T) ξ_{t_k} − (σ τ_k H_T + B̃_{τ_k})|`.
    pub max_eta_gap: f64,
    /// Largest relative difference between finite-horizon and asymptotic
    /// reduction probabilities over grid points and levels.
    pub max_prob_gap: f64,
    pub grid_meta: GridMeta,
}

/// Relative difference `|a − b| / max(|a|, |b|)`, zero when both vanish.
/// The denominator is floored at the smallest normal float so underflowed
/// tails do not register as full-size gaps.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Recomputes `η` through the time change and through the asymptotic ansatz
/// on the same Brownian increments and reports the discrepancies. Grid
/// points at `T` itself are skipped.
pub fn equivalence_check(
    info: &InformationPath,
    reduction: &ReductionPath,
    horizon: f64,
    sigma: f64,
    system: &QuantumSystem,
) -> Result<EquivalenceReport> {
    let Some(brownian) = info.brownian() else {
        return Err(Error::Unsupported(
            "equivalence check needs a bridge built pathwise from a Brownian motion".into(),
        ));
    };
    if info.grid() != &reduction.grid {
        return Err(Error::GridMismatch(
            "information and reduction paths are on different grids".into(),
        ));
    }
    let grid = info.grid().without_sentinel();
    let n = grid.len();
    let times = grid.times();
    let bm_tilde = fast_forward_values(times, &brownian[..n], horizon)?;
    let asymptotic = asymptotic_information(info.terminal_level(), &bm_tilde, sigma, system)?;

    let mut max_eta_gap = 0.0f64;
    let mut max_prob_gap = 0.0f64;
    for k in 0..n {
        let tau = asymptotic.tau[k];
        let eta_clock = (1.0 + tau / horizon) * info.xi()[k];
        max_eta_gap = max_eta_gap.max((eta_clock - asymptotic.eta[k]).abs());
        let p_asym = asymptotic_probabilities(asymptotic.eta[k], tau, system, sigma)?;
        for (a, b) in reduction.probabilities[k].iter().zip(&p_asym) {
            max_prob_gap = max_prob_gap.max(relative_gap(*a, *b));
        }
    }
    Ok(EquivalenceReport {
        max_eta_gap,
        max_prob_gap,
        grid_meta: GridMeta {
            horizon,
            n_points: n,
            t_max: grid.t_max(),
            tau_max: asymptotic.tau[n - 1],
            scheme: grid.scheme(),
            epsilon_fraction: grid.epsilon_fraction(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_grid, NoiseKind, TimeGrid};
    use crate::system::build_system;
    use num_complex::Complex64 as C64;

    #[test]
    fn clock_examples() {
        assert_eq!(tau_of_t(0.0, 2.0).unwrap(), 0.0);
        assert_eq!(tau_of_t(1.0, 2.0).unwrap(), 2.0);
        assert!(tau_of_t(2.0, 2.0).is_err());
        assert_eq!(t_of_tau(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(t_of_tau(3.0, 3.0).unwrap(), 1.5);
        assert_eq!(t_of_tau(1e6, 1.0).unwrap(), 1e6 / (1e6 + 1.0));
        assert!(t_of_tau(-1.0, 1.0).is_err());
    }

    #[test]
    fn fast_forward_examples() {
        let g = TimeGrid::from_times(1.0, vec![0.0, 0.5]).unwrap();
        let bm = NoisePath::new(g.clone(), vec![0.0, 1.0], NoiseKind::Brownian).unwrap();
        let ff = fast_forward_bm(&bm, 1.0).unwrap();
        assert_eq!(ff.tau, vec![0.0, 1.0]);
        assert_eq!(ff.values, vec![0.0, 1.0]);

        let zero = NoisePath::new(g, vec![0.0, 0.0], NoiseKind::Brownian).unwrap();
        assert_eq!(fast_forward_bm(&zero, 1.0).unwrap().values, vec![0.0, 0.0]);
    }

    #[test]
    fn asymptotic_information_examples() {
        let sys = build_system(&[0.0, 2.0], &[C64::new(1.0, 0.0); 2], 1e-9).unwrap();
        let ff = FastForwardedBm {
            tau: vec![0.0, 1.0, 3.0],
            values: vec![0.0, 0.0, 0.0],
        };
        let path = asymptotic_information(1, &ff, 0.5, &sys).unwrap();
        assert_eq!(path.eta, vec![0.0, 1.0, 3.0]);
        let noisy = FastForwardedBm {
            tau: vec![0.0, 1.0],
            values: vec![0.0, 0.4],
        };
        assert_eq!(
            asymptotic_information(0, &noisy, 0.5, &sys).unwrap().eta,
            vec![0.0, 0.4]
        );
    }

    #[test]
    fn asymptotic_probability_examples() {
        let sys = build_system(
            &[0.0, 1.0],
            &[C64::new(0.3f64.sqrt(), 0.0), C64::new(0.7f64.sqrt(), 0.0)],
            1e-9,
        )
        .unwrap();
        let p = asymptotic_probabilities(0.0, 0.0, &sys, 1.0).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);
        let single = build_system(&[4.0], &[C64::new(1.0, 0.0)], 1e-9).unwrap();
        assert_eq!(asymptotic_probabilities(-2.0, 10.0, &single, 1.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn relative_gap_handles_zeros() {
        assert_eq!(relative_gap(0.0, 0.0), 0.0);
        assert_eq!(relative_gap(1.0, 1.0), 0.0);
        assert!((relative_gap(1.0, 1.0 + 1e-12) - 1e-12).abs() < 1e-16);
        assert!(relative_gap(0.0, 1e-320) < 1e-10);
    }

    #[test]
    fn uniform_tau_grid_maps_to_uniform_clock() {
        let g = make_grid(1.0, 10, GridScheme::UniformTau, 0.01).unwrap();
        let tau: Vec<f64> = g.times().iter().map(|&t| tau_of_t(t, 1.0).unwrap()).collect();
        let step = tau[1];
        for w in tau.windows(2) {
            assert!(((w[1] - w[0]) - step).abs() < 1e-9 * step.max(1.0));
        }
    }
}
