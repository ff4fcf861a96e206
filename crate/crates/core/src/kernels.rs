//! Time grids, seeded random streams, Brownian motion and Brownian bridges.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timechange::{t_of_tau, tau_of_t};

/// How grid points are spread over `[0, t_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScheme {
    /// Equal steps in the finite-horizon clock `t`.
    UniformT,
    /// Equal steps in the asymptotic clock `τ = tT/(T−t)`; points cluster near `T`.
    UniformTau,
}

/// A strictly increasing time grid on `[0, T)`, optionally closed by a
/// sentinel point exactly at `T`.
///
/// Cloning is cheap: the time points are shared.
#[derive(Clone, Debug)]
pub struct TimeGrid {
    horizon: f64,
    times: Arc<[f64]>,
    scheme: GridScheme,
    epsilon_fraction: f64,
    sentinel: bool,
}

impl PartialEq for TimeGrid {
    fn eq(&self, other: &Self) -> bool {
        self.horizon == other.horizon
            && self.sentinel == other.sentinel
            && (Arc::ptr_eq(&self.times, &other.times) || self.times == other.times)
    }
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn scheme(&self) -> GridScheme {
        self.scheme
    }

    pub fn epsilon_fraction(&self) -> f64 {
        self.epsilon_fraction
    }

    pub fn has_sentinel(&self) -> bool {
        self.sentinel
    }

    /// Number of steps, i.e. intervals, in the grid.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Last grid time strictly before the horizon.
    pub fn t_max(&self) -> f64 {
        let n = self.times.len();
        if self.sentinel {
            self.times[n - 2]
        } else {
            self.times[n - 1]
        }
    }

    /// Index of the last time strictly before the horizon.
    pub fn t_max_index(&self) -> usize {
        if self.sentinel {
            self.times.len() - 2
        } else {
            self.times.len() - 1
        }
    }

    /// Whether grid point `k` is the sentinel at `T`.
    pub fn is_sentinel(&self, k: usize) -> bool {
        self.sentinel && k + 1 == self.times.len()
    }

    /// Appends a sentinel point exactly at `T`, used by closed-form evaluation.
    pub fn with_sentinel(&self) -> TimeGrid {
        if self.sentinel {
            return self.clone();
        }
        let mut times = self.times.to_vec();
        times.push(self.horizon);
        TimeGrid {
            times: times.into(),
            sentinel: true,
            ..self.clone()
        }
    }

    /// Drops the sentinel if present.
    pub fn without_sentinel(&self) -> TimeGrid {
        if !self.sentinel {
            return self.clone();
        }
        TimeGrid {
            times: self.times[..self.times.len() - 1].into(),
            sentinel: false,
            ..self.clone()
        }
    }

    /// Every `stride`-th point of this grid. The grid must have no sentinel
    /// and its step count must be divisible by `stride`.
    pub fn coarsen(&self, stride: usize) -> Result<TimeGrid> {
        if stride == 0 || self.sentinel || !self.n_steps().is_multiple_of(stride) || self.n_steps() / stride < 1 {
            return Err(Error::config(
                "grid.n_steps",
                format!("cannot coarsen a {}-step grid by {stride}", self.n_steps()),
            ));
        }
        let times: Vec<f64> = self.times.iter().step_by(stride).copied().collect();
        Ok(TimeGrid {
            times: times.into(),
            ..self.clone()
        })
    }

    pub fn from_times(horizon: f64, times: Vec<f64>) -> Result<TimeGrid> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(
                "schedule.T",
                format!("horizon must be positive, got {horizon}"),
            ));
        }
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::config("grid", "need at least two points starting at 0"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("grid", "times must be strictly increasing"));
        }
        let last = *times.last().unwrap();
        if last > horizon {
            return Err(Error::config("grid", "times exceed the horizon"));
        }
        let sentinel = last == horizon;
        Ok(TimeGrid {
            horizon,
            epsilon_fraction: 1.0 - times[times.len() - 1 - sentinel as usize] / horizon,
            times: times.into(),
            scheme: GridScheme::UniformT,
            sentinel,
        })
    }

    /// Index of the grid point closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (k, &s) in self.times.iter().enumerate() {
            if (s - t).abs() < (self.times[best] - t).abs() {
                best = k;
            }
        }
        best
    }
}

/// Builds a grid on `[0, T(1 − epsilon_fraction)]` with `n_steps` intervals.
pub fn make_grid(horizon: f64, n_steps: usize, scheme: GridScheme, epsilon_fraction: f64) -> Result<TimeGrid> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::config("schedule.T", format!("must be positive, got {horizon}")));
    }
    if n_steps < 2 {
        return Err(Error::config(
            "grid.n_steps",
            format!("need at least 2 steps, got {n_steps}"),
        ));
    }
    if !(epsilon_fraction > 0.0 && epsilon_fraction < 1.0) {
        return Err(Error::config(
            "grid.epsilon_fraction",
            format!("must lie in (0, 1), got {epsilon_fraction}"),
        ));
    }
    let t_max = horizon * (1.0 - epsilon_fraction);
    let n = n_steps as f64;
    let times: Vec<f64> = match scheme {
        GridScheme::UniformT => (0..=n_steps).map(|k| k as f64 * t_max / n).collect(),
        GridScheme::UniformTau => {
            let tau_max = tau_of_t(t_max, horizon)?;
            (0..=n_steps)
                .map(|k| t_of_tau(k as f64 * tau_max / n, horizon))
                .collect::<Result<_>>()?
        }
    };
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config(
            "grid.n_steps",
            "too many steps for floating-point resolution",
        ));
    }
    Ok(TimeGrid {
        horizon,
        times: times.into(),
        scheme,
        epsilon_fraction,
        sentinel: false,
    })
}

/// Identifies one path's random streams: `(master_seed, path_index)` maps to
/// a fixed ChaCha20 stream regardless of execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub path_index: u64,
}

/// Independent substreams within one path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Draw of the terminal energy level.
    Terminal,
    /// Gaussian increments for Brownian paths and bridges.
    Noise,
}

impl SeedSpec {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        Self {
            master_seed,
            path_index,
        }
    }

    /// Fresh generator for one substream. Substreams are separated by 2^60
    /// words within the path's ChaCha stream.
    pub fn rng(&self, stream: Stream) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.path_index);
        let offset: u128 = match stream {
            Stream::Terminal => 0,
            Stream::Noise => 1,
        };
        rng.set_word_pos(offset << 60);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Brownian,
    Bridge,
    /// Driving noise recovered from an information path.
    Reconstructed,
    /// `W + ∫σ_s H_s ds`.
    Drifted,
    /// Brownian motion run on the asymptotic clock.
    FastForwarded,
}

/// A sampled noise trajectory on a time grid.
#[derive(Clone, Debug)]
pub struct NoisePath {
    grid: TimeGrid,
    values: Vec<f64>,
    kind: NoiseKind,
    generator: Option<Arc<[f64]>>,
}

impl NoisePath {
    pub fn new(grid: TimeGrid, values: Vec<f64>, kind: NoiseKind) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values on a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            values,
            kind,
            generator: None,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    /// For bridges built by [`bridge_from_bm`], the Brownian path they were
    /// built from.
    pub fn generating_brownian(&self) -> Option<&[f64]> {
        self.generator.as_deref()
    }

    /// Restriction to a coarser grid obtained by [`TimeGrid::coarsen`].
    pub fn coarsen(&self, stride: usize) -> Result<NoisePath> {
        let grid = self.grid.coarsen(stride)?;
        let values = self.values.iter().step_by(stride).copied().collect();
        NoisePath::new(grid, values, self.kind)
    }

    /// Increments `values[k+1] - values[k]`.
    pub fn increments(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Standard Brownian motion sampled at the grid times.
pub fn sample_brownian(grid: &TimeGrid, seed: SeedSpec) -> NoisePath {
    let mut rng = seed.rng(Stream::Noise);
    let times = grid.times();
    let mut values = Vec::with_capacity(times.len());
    let mut b = 0.0;
    values.push(b);
    for w in times.windows(2) {
        let z: f64 = StandardNormal.sample(&mut rng);
        b += z * (w[1] - w[0]).sqrt();
        values.push(b);
    }
    NoisePath {
        grid: grid.clone(),
        values,
        kind: NoiseKind::Brownian,
        generator: None,
    }
}

/// Brownian bridge from a Brownian path through the left-point discretization
/// of `β_t = (T − t) ∫₀ᵗ dB_s / (T − s)`.
pub fn bridge_from_bm(bm: &NoisePath, horizon: f64) -> Result<NoisePath> {
    if bm.kind != NoiseKind::Brownian {
        return Err(Error::Domain(format!("expected a Brownian path, got {:?}", bm.kind)));
    }
    if bm.grid.horizon != horizon {
        return Err(Error::Domain(format!(
            "bridge horizon {horizon} does not match grid horizon {}",
            bm.grid.horizon
        )));
    }
    let times = bm.grid.times();
    let mut values = Vec::with_capacity(times.len());
    values.push(0.0);
    let mut weighted_sum = 0.0;
    for k in 1..times.len() {
        weighted_sum += (bm.values[k] - bm.values[k - 1]) / (horizon - times[k - 1]);
        values.push((horizon - times[k]) * weighted_sum);
    }
    Ok(NoisePath {
        grid: bm.grid.clone(),
        values,
        kind: NoiseKind::Bridge,
        generator: Some(bm.values.clone().into()),
    })
}

/// Brownian bridge pinned at `T`, sampled exactly in law by sequential
/// Gaussian conditional transitions.
pub fn sample_bridge_exact(grid: &TimeGrid, horizon: f64, seed: SeedSpec) -> Result<NoisePath> {
    if grid.horizon != horizon {
        return Err(Error::Domain(format!(
            "bridge horizon {horizon} does not match grid horizon {}",
            grid.horizon
        )));
    }
    let mut rng = seed.rng(Stream::Noise);
    let times = grid.times();
    let mut values = Vec::with_capacity(times.len());
    let mut beta = 0.0;
    values.push(beta);
    for w in times.windows(2) {
        let (s, t) = (w[0], w[1]);
        let remaining = horizon - s;
        let mean = beta * (horizon - t) / remaining;
        let var = (t - s) * (horizon - t) / remaining;
        let z: f64 = StandardNormal.sample(&mut rng);
        beta = if t == horizon { 0.0 } else { mean + var.sqrt() * z };
        values.push(beta);
    }
    Ok(NoisePath {
        grid: grid.clone(),
        values,
        kind: NoiseKind::Bridge,
        generator: None,
    })
}
