//! Finite-dimensional quantum systems in the energy eigenbasis.
//!
//! The Hamiltonian is carried only through its eigen-decomposition: a list of
//! distinct energy levels, each owning a set of eigenbasis indices. All of the
//! reduction dynamics commute with the Hamiltonian, so nothing else is needed.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distinct energy levels and the eigenbasis indices spanning each eigenspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySpectrum {
    energies: Vec<f64>,
    levels: Vec<Vec<usize>>,
    level_of: Vec<usize>,
}

impl EnergySpectrum {
    /// Groups raw eigenvalues into levels. Sorted eigenvalues closer than
    /// `tolerance` to their neighbour are chained into one level whose energy
    /// is the mean of the merged values.
    pub fn from_eigenvalues(eigenvalues: &[f64], tolerance: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidSystem("no energy eigenvalues given".into()));
        }
        if !(tolerance >= 0.0 && tolerance.is_finite()) {
            return Err(Error::InvalidSystem(format!(
                "degeneracy tolerance must be finite and nonnegative, got {tolerance}"
            )));
        }
        if let Some(bad) = eigenvalues.iter().find(|e| !e.is_finite()) {
            return Err(Error::InvalidSystem(format!("non-finite eigenvalue {bad}")));
        }

        let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eigenvalues[a].total_cmp(&eigenvalues[b]).then(a.cmp(&b)));

        let mut levels: Vec<Vec<usize>> = Vec::new();
        let mut last = f64::NEG_INFINITY;
        for &idx in &order {
            let e = eigenvalues[idx];
            match levels.last_mut() {
                Some(level) if e - last <= tolerance => level.push(idx),
                _ => levels.push(vec![idx]),
            }
            last = e;
        }
        for level in &mut levels {
            level.sort_unstable();
        }

        let energies = levels
            .iter()
            .map(|level| level.iter().map(|&i| eigenvalues[i]).sum::<f64>() / level.len() as f64)
            .collect();
        let mut level_of = vec![0; eigenvalues.len()];
        for (k, level) in levels.iter().enumerate() {
            for &i in level {
                level_of[i] = k;
            }
        }
        Ok(Self {
            energies,
            levels,
            level_of,
        })
    }

    /// Distinct level energies, strictly increasing.
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn energy(&self, level: usize) -> f64 {
        self.energies[level]
    }

    /// Eigenbasis indices belonging to `level`.
    pub fn level_indices(&self, level: usize) -> &[usize] {
        &self.levels[level]
    }

    /// Level owning eigenbasis index `index`.
    pub fn level_of(&self, index: usize) -> usize {
        self.level_of[index]
    }

    pub fn num_levels(&self) -> usize {
        self.energies.len()
    }

    /// Hilbert space dimension.
    pub fn dim(&self) -> usize {
        self.level_of.len()
    }
}

/// Unit-norm initial amplitudes, one per eigenbasis index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    amplitudes: Vec<C64>,
}

impl InitialState {
    pub fn new(amplitudes: &[C64]) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidSystem("no amplitudes given".into()));
        }
        if amplitudes.iter().any(|a| !(a.re.is_finite() && a.im.is_finite())) {
            return Err(Error::InvalidState("non-finite amplitude".into()));
        }
        let norm = norm(amplitudes);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidState("amplitudes have zero norm".into()));
        }
        Ok(Self {
            amplitudes: amplitudes.iter().map(|a| a / norm).collect(),
        })
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }
}

/// Euclidean norm of a complex vector.
pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
}

/// A finite-dimensional system: spectrum, initial state, Born weights and
/// Lüders states. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantumSystem {
    spectrum: EnergySpectrum,
    initial: InitialState,
    born_weights: Vec<f64>,
    lueders_states: Vec<Option<Vec<C64>>>,
}

impl QuantumSystem {
    pub fn spectrum(&self) -> &EnergySpectrum {
        &self.spectrum
    }

    pub fn initial(&self) -> &InitialState {
        &self.initial
    }

    /// Born weight of each level.
    pub fn born_weights(&self) -> &[f64] {
        &self.born_weights
    }

    /// Normalized projection of the initial state onto `level`, as a full
    /// amplitude vector. `None` for levels of zero weight.
    pub fn lueders_state(&self, level: usize) -> Option<&[C64]> {
        self.lueders_states[level].as_deref()
    }

    pub fn energies(&self) -> &[f64] {
        self.spectrum.energies()
    }

    pub fn num_levels(&self) -> usize {
        self.spectrum.num_levels()
    }

    pub fn dim(&self) -> usize {
        self.spectrum.dim()
    }
}

/// Builds a system from raw eigenvalues and (possibly unnormalized) amplitudes.
pub fn build_system(energies: &[f64], amplitudes: &[C64], degeneracy_tolerance: f64) -> Result<QuantumSystem> {
    if energies.is_empty() {
        return Err(Error::InvalidSystem("empty energy list".into()));
    }
    if energies.len() != amplitudes.len() {
        return Err(Error::InvalidSystem(format!(
            "{} energies but {} amplitudes",
            energies.len(),
            amplitudes.len()
        )));
    }
    let spectrum = EnergySpectrum::from_eigenvalues(energies, degeneracy_tolerance)?;
    let initial = InitialState::new(amplitudes)?;
    let psi = initial.amplitudes();

    let mut born_weights: Vec<f64> = (0..spectrum.num_levels())
        .map(|k| spectrum.level_indices(k).iter().map(|&i| psi[i].norm_sqr()).sum())
        .collect();
    let total: f64 = born_weights.iter().sum();
    born_weights.iter_mut().for_each(|w| *w /= total);

    let lueders_states = (0..spectrum.num_levels())
        .map(|k| {
            let indices = spectrum.level_indices(k);
            let level_norm = indices.iter().map(|&i| psi[i].norm_sqr()).sum::<f64>().sqrt();
            if level_norm == 0.0 {
                return None;
            }
            let mut state = vec![C64::new(0.0, 0.0); psi.len()];
            for &i in indices {
                state[i] = psi[i] / level_norm;
            }
            Some(state)
        })
        .collect();

    Ok(QuantumSystem {
        spectrum,
        initial,
        born_weights,
        lueders_states,
    })
}

pub fn born_weights(system: &QuantumSystem) -> Vec<f64> {
    system.born_weights.clone()
}

/// Mean and variance of the energy in the initial state.
pub fn energy_moments(system: &QuantumSystem) -> (f64, f64) {
    weighted_moments(system.born_weights(), system.energies())
}

pub(crate) fn weighted_moments(weights: &[f64], energies: &[f64]) -> (f64, f64) {
    let mean: f64 = weights.iter().zip(energies).map(|(w, e)| w * e).sum();
    let variance = weights
        .iter()
        .zip(energies)
        .map(|(w, e)| w * (e - mean).powi(2))
        .sum::<f64>()
        .max(0.0);
    (mean, variance)
}

/// Characteristic reduction time in seconds for an initial energy
/// uncertainty `delta_h_mev` in MeV: `(2.8 MeV / ΔH)² s`.
pub fn reduction_timescale(delta_h_mev: f64) -> Result<f64> {
    if !(delta_h_mev > 0.0 && delta_h_mev.is_finite()) {
        return Err(Error::Domain(format!(
            "energy uncertainty must be positive, got {delta_h_mev}"
        )));
    }
    const REFERENCE_MEV: f64 = 2.8;
    Ok((REFERENCE_MEV / delta_h_mev).powi(2))
}
