//! Closed-form route.
//!
//! The terminal energy `H_T` is drawn from the Born weights and combined with
//! an independent Brownian bridge into the information process
//! `ξ_t = σ t H_T + β_t`. Reduction probabilities, energy moments and the
//! state vector are explicit functions of `(ξ_t, t)`, so no time stepping is
//! involved. Exponents grow like `1/(T − t)` and are always normalized in the
//! log domain.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{NoiseKind, NoisePath, SeedSpec, Stream, TimeGrid};
use crate::system::{weighted_moments, QuantumSystem};
use crate::timechange::tau_of_t;

/// Reduction horizon `T` and volatility `σ`; `σ_t = σT/(T − t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReductionSchedule {
    horizon: f64,
    sigma: f64,
}

impl ReductionSchedule {
    pub fn new(horizon: f64, sigma: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config("schedule.T", format!("must be positive, got {horizon}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(
                "schedule.sigma",
                format!("must be positive, got {sigma}"),
            ));
        }
        Ok(Self { horizon, sigma })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `σ_t = σT/(T − t)`, defined for `0 ≤ t < T`.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.sigma * self.horizon / (self.horizon - t))
    }

    /// `∫₀ᵗ σ_s² ds = σ² τ(t)`, in closed form.
    pub fn integrated_variance(&self, t: f64) -> Result<f64> {
        Ok(self.sigma * self.sigma * tau_of_t(t, self.horizon)?)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t < self.horizon) {
            return Err(Error::Domain(format!(
                "time {t} outside [0, T) with T = {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Normalizes log-weights into probabilities in place by max-subtraction.
/// Entries equal to `-inf` come out as exactly zero.
pub(crate) fn softmax_in_place(log_weights: &mut [f64]) {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "at least one finite log-weight required");
    let mut total = 0.0;
    for w in log_weights.iter_mut() {
        *w = if *w == f64::NEG_INFINITY { 0.0 } else { (*w - max).exp() };
        total += *w;
    }
    log_weights.iter_mut().for_each(|w| *w /= total);
}

/// Log of `Σ_i exp(x_i)`, ignoring `-inf` entries.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Draws the terminal level `k` with probability `π_k`.
pub fn sample_terminal_energy(system: &QuantumSystem, seed: SeedSpec) -> usize {
    let u: f64 = seed.rng(Stream::Terminal).random();
    let weights = system.born_weights();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cumulative += w;
            last_positive = k;
            if u < cumulative {
                return k;
            }
        }
    }
    last_positive
}

/// `ξ_t` on a grid together with the terminal level that generated it.
#[derive(Clone, Debug)]
pub struct InformationPath {
    grid: TimeGrid,
    xi: Vec<f64>,
    terminal_level: usize,
    brownian: Option<Arc<[f64]>>,
}

impl InformationPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn terminal_level(&self) -> usize {
        self.terminal_level
    }

    /// The Brownian path behind the bridge, when the bridge was built
    /// pathwise from one.
    pub fn brownian(&self) -> Option<&[f64]> {
        self.brownian.as_deref()
    }
}

/// `ξ_t = σ t E_k + β_t` pointwise on the bridge's grid.
pub fn information_process(
    terminal_level: usize,
    bridge: &NoisePath,
    schedule: &ReductionSchedule,
    system: &QuantumSystem,
) -> Result<InformationPath> {
    if bridge.kind() != NoiseKind::Bridge {
        return Err(Error::Domain(format!("expected a bridge, got {:?}", bridge.kind())));
    }
    if bridge.grid().horizon() != schedule.horizon() {
        return Err(Error::Domain(format!(
            "bridge horizon {} does not match schedule horizon {}",
            bridge.grid().horizon(),
            schedule.horizon()
        )));
    }
    if terminal_level >= system.num_levels() {
        return Err(Error::Domain(format!("no level {terminal_level}")));
    }
    let drift = schedule.sigma() * system.energies()[terminal_level];
    let xi = bridge
        .grid()
        .times()
        .iter()
        .zip(bridge.values())
        .map(|(&t, &beta)| drift * t + beta)
        .collect();
    Ok(InformationPath {
        grid: bridge.grid().clone(),
        xi,
        terminal_level,
        brownian: bridge.generating_brownian().map(Arc::from),
    })
}

/// Reduction probabilities given `ξ_t`:
/// `π_it ∝ π_i exp[(σ ξ E_i T − ½σ²E_i² t T)/(T − t)]`.
pub fn conditional_probabilities(
    xi: f64,
    t: f64,
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
) -> Result<Vec<f64>> {
    schedule.check_time(t)?;
    let (horizon, sigma) = (schedule.horizon, schedule.sigma);
    let scale = sigma * horizon / (horizon - t);
    let mut log_w: Vec<f64> = system
        .born_weights()
        .iter()
        .zip(system.energies())
        .map(|(&p, &e)| {
            if p == 0.0 {
                f64::NEG_INFINITY
            } else {
                p.ln() + scale * (xi * e - 0.5 * sigma * e * e * t)
            }
        })
        .collect();
    softmax_in_place(&mut log_w);
    Ok(log_w)
}

/// The same probabilities via Bayes' rule with the Gaussian likelihood of
/// `ξ_t` given `H_T = E_i` (mean `σ t E_i`, variance `t(T − t)/T`).
/// Densities are combined in log form; at `t = 0` the prior is returned.
pub fn bayes_probabilities(xi: f64, t: f64, system: &QuantumSystem, schedule: &ReductionSchedule) -> Result<Vec<f64>> {
    schedule.check_time(t)?;
    if t == 0.0 {
        return Ok(system.born_weights().to_vec());
    }
    let (horizon, sigma) = (schedule.horizon, schedule.sigma);
    let var = t * (horizon - t) / horizon;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let mut log_w: Vec<f64> = system
        .born_weights()
        .iter()
        .zip(system.energies())
        .map(|(&p, &e)| {
            if p == 0.0 {
                f64::NEG_INFINITY
            } else {
                let dev = xi - sigma * t * e;
                p.ln() + log_norm - dev * dev / (2.0 * var)
            }
        })
        .collect();
    softmax_in_place(&mut log_w);
    Ok(log_w)
}

/// `(H, V)` for a probability vector over levels.
pub fn moments_from_probabilities(probabilities: &[f64], system: &QuantumSystem) -> (f64, f64) {
    weighted_moments(probabilities, system.energies())
}

fn assemble_state(probabilities: &[f64], t: f64, system: &QuantumSystem) -> Vec<C64> {
    let mut psi = vec![C64::new(0.0, 0.0); system.dim()];
    for (level, &p) in probabilities.iter().enumerate() {
        let Some(phi) = system.lueders_state(level) else {
            continue;
        };
        let coeff = C64::from_polar(p.sqrt(), -system.energies()[level] * t);
        for &j in system.spectrum().level_indices(level) {
            psi[j] = coeff * phi[j];
        }
    }
    psi
}

/// `|ψ_t⟩ = e^{−iĤt} Σ_i √π_it |φ_i⟩` in the eigenbasis.
pub fn state_vector(xi: f64, t: f64, system: &QuantumSystem, schedule: &ReductionSchedule) -> Result<Vec<C64>> {
    let probabilities = conditional_probabilities(xi, t, system, schedule)?;
    Ok(assemble_state(&probabilities, t, system))
}

/// The collapsed state `e^{−iE_k T}|φ_k⟩` reached at `t = T`.
pub fn terminal_limit(terminal_level: usize, system: &QuantumSystem, horizon: f64) -> Result<Vec<C64>> {
    if terminal_level >= system.num_levels() || system.born_weights()[terminal_level] == 0.0 {
        return Err(Error::Domain(format!(
            "level {terminal_level} has zero Born weight and cannot be a collapse outcome"
        )));
    }
    let mut one_hot = vec![0.0; system.num_levels()];
    one_hot[terminal_level] = 1.0;
    Ok(assemble_state(&one_hot, horizon, system))
}

/// Per-time reduction probabilities, energy, energy variance and state.
#[derive(Clone, Debug)]
pub struct ReductionPath {
    pub grid: TimeGrid,
    pub probabilities: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    pub variance: Vec<f64>,
    pub amplitudes: Vec<Vec<C64>>,
}

impl ReductionPath {
    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }
}

/// Evaluates the closed-form solution along an information path. The
/// sentinel at `T`, if present, is served by [`terminal_limit`].
pub fn reduce(info: &InformationPath, system: &QuantumSystem, schedule: &ReductionSchedule) -> Result<ReductionPath> {
    let grid = info.grid();
    let n = grid.len();
    let mut path = ReductionPath {
        grid: grid.clone(),
        probabilities: Vec::with_capacity(n),
        energy: Vec::with_capacity(n),
        variance: Vec::with_capacity(n),
        amplitudes: Vec::with_capacity(n),
    };
    for (k, (&t, &xi)) in grid.times().iter().zip(info.xi()).enumerate() {
        let (probabilities, amplitudes) = if grid.is_sentinel(k) {
            let mut one_hot = vec![0.0; system.num_levels()];
            one_hot[info.terminal_level] = 1.0;
            (one_hot, terminal_limit(info.terminal_level, system, schedule.horizon)?)
        } else {
            let p = conditional_probabilities(xi, t, system, schedule)?;
            let psi = assemble_state(&p, t, system);
            (p, psi)
        };
        let (h, v) = moments_from_probabilities(&probabilities, system);
        path.probabilities.push(probabilities);
        path.energy.push(h);
        path.variance.push(v);
        path.amplitudes.push(amplitudes);
    }
    Ok(path)
}

/// Driving noise implied by an information path:
/// `W_t = ξ_t + ∫₀ᵗ (ξ_s − σT H_s)/(T − s) ds`, left-point quadrature.
pub fn reconstruct_noise(
    info: &InformationPath,
    reduction: &ReductionPath,
    schedule: &ReductionSchedule,
) -> Result<NoisePath> {
    if info.grid() != &reduction.grid {
        return Err(Error::GridMismatch(
            "information and reduction paths are on different grids".into(),
        ));
    }
    let horizon = schedule.horizon();
    let sigma_t = schedule.sigma() * horizon;
    let times = info.grid().times();
    let xi = info.xi();
    let mut values = Vec::with_capacity(times.len());
    values.push(0.0);
    let mut drift = 0.0;
    for k in 1..times.len() {
        let j = k - 1;
        drift += (xi[j] - sigma_t * reduction.energy[j]) / (horizon - times[j]) * (times[k] - times[j]);
        values.push(xi[k] + drift);
    }
    NoisePath::new(info.grid().clone(), values, NoiseKind::Reconstructed)
}

/// How the bridge of an exact-route path is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BridgeConstruction {
    /// Sequential conditional sampling, exact in law.
    Exact,
    /// Built pathwise from a Brownian path, which is kept for time-change checks.
    FromBrownian,
}

/// One complete exact-route path: terminal level, information process and
/// the closed-form reduction along it.
pub fn exact_path(
    system: &QuantumSystem,
    schedule: &ReductionSchedule,
    grid: &TimeGrid,
    seed: SeedSpec,
    construction: BridgeConstruction,
) -> Result<(InformationPath, ReductionPath)> {
    let level = sample_terminal_energy(system, seed);
    let bridge = match construction {
        BridgeConstruction::Exact => crate::kernels::sample_bridge_exact(grid, schedule.horizon(), seed)?,
        BridgeConstruction::FromBrownian => {
            let bm = crate::kernels::sample_brownian(grid, seed);
            crate::kernels::bridge_from_bm(&bm, schedule.horizon())?
        }
    };
    let info = information_process(level, &bridge, schedule, system)?;
    let reduction = reduce(&info, system, schedule)?;
    Ok((info, reduction))
}
