//! Cox-construction simulator for LSI pure jump paths.
//!
//! Jump `k` fires at the first `t > tau_{k-1}` where
//! `int_{tau_{k-1}}^t eta_s lambda(s, x) / gamma_x(s) ds` reaches the clock
//! `E_k`, with `x` the current state. Every factor is constant on a grid
//! cell, so the integrated intensity is piecewise linear and the crossing
//! time is solved exactly inside its cell.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eta::{EtaModel, EtaPath};
use crate::grid::{integrate_cells, Bounds, GridFunction, TimeGrid};
use crate::jumps::JumpDistribution;
use crate::lattice::StateLattice;
use crate::rng::{tags, RngStream};

/// Local intensity `lambda(., x)` for every lattice state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensitySpec {
    pub lambda: Vec<GridFunction>,
    pub bounds: Bounds,
}

impl IntensitySpec {
    pub fn new(lambda: Vec<GridFunction>, bounds: Bounds) -> Result<Self> {
        for (x, f) in lambda.iter().enumerate() {
            f.check_bounds(&bounds, &format!("lambda(., state #{x})"))?;
        }
        Ok(Self { lambda, bounds })
    }

    pub fn constant(grid: TimeGrid, n_states: usize, value: f64, bounds: Bounds) -> Result<Self> {
        Self::new(vec![GridFunction::constant(grid, value); n_states], bounds)
    }

    pub fn n_states(&self) -> usize {
        self.lambda.len()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.lambda[0].grid()
    }

    /// Copy with every value multiplied by `factor` (bounds widened to fit).
    pub fn scaled(&self, factor: f64) -> Self {
        let lambda = self
            .lambda
            .iter()
            .map(|f| {
                let mut g = f.clone();
                g.values_mut().iter_mut().for_each(|v| *v *= factor);
                g
            })
            .collect();
        let lo = self.bounds.lower * factor.min(1.0);
        let hi = self.bounds.upper * factor.max(1.0);
        Self {
            lambda,
            bounds: Bounds { lower: lo, upper: hi },
        }
    }
}

/// Leverage functions `gamma_x`, one per lattice state (by ordinal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaFamily {
    pub states: Vec<f64>,
    pub gamma: Vec<GridFunction>,
}

impl GammaFamily {
    pub fn constant(lattice: &StateLattice, grid: TimeGrid, value: f64) -> Self {
        Self {
            states: lattice.states().to_vec(),
            gamma: vec![GridFunction::constant(grid, value); lattice.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.gamma[0].grid()
    }

    pub fn check_bounds(&self, bounds: &Bounds) -> Result<()> {
        for (x, g) in self.gamma.iter().enumerate() {
            g.check_bounds(bounds, &format!("gamma(state #{x})"))?;
        }
        Ok(())
    }

    /// Copy with state `ordinal` multiplied by `factor` (no clamping).
    pub fn perturbed(&self, ordinal: usize, factor: f64) -> Self {
        let mut out = self.clone();
        out.gamma[ordinal]
            .values_mut()
            .iter_mut()
            .for_each(|v| *v *= factor);
        out
    }

    /// Largest sup-norm difference across states.
    pub fn max_distance(&self, other: &GammaFamily) -> f64 {
        self.gamma
            .iter()
            .zip(&other.gamma)
            .map(|(a, b)| a.weighted_sup_distance(b, 0.0))
            .fold(0.0, f64::max)
    }
}

/// Realized `(tau_k, J_k)` sequence on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpPath {
    pub horizon: f64,
    pub times: Vec<f64>,
    pub sizes: Vec<f64>,
    pub atom_indices: Vec<usize>,
    /// Lattice ordinal after each jump.
    pub states_after: Vec<usize>,
}

impl JumpPath {
    pub fn empty(horizon: f64) -> Self {
        Self {
            horizon,
            times: Vec::new(),
            sizes: Vec::new(),
            atom_indices: Vec::new(),
            states_after: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Ordinal of `X_{tau_k -}` for jump `k` (0-based).
    pub fn state_before(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.states_after[k - 1]
        }
    }

    /// Number of jumps at or before `t`.
    pub fn count_until(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    /// Number of jumps strictly before `t`.
    pub fn count_before(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s < t)
    }

    /// Lattice ordinal of `X_t`.
    pub fn ordinal_at(&self, t: f64) -> usize {
        match self.count_until(t) {
            0 => 0,
            k => self.states_after[k - 1],
        }
    }

    /// Lattice ordinal of `X_{t-}`.
    pub fn ordinal_before(&self, t: f64) -> usize {
        match self.count_before(t) {
            0 => 0,
            k => self.states_after[k - 1],
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        self.sizes[..self.count_until(t)].iter().sum()
    }
}

/// Source of clocks `E_k` and jump-size indices.
pub trait Draws {
    /// Next clock; `None` means no further jumps will occur.
    fn clock(&mut self) -> Option<f64>;
    fn jump(&mut self, nu: &JumpDistribution) -> usize;
}

/// Clocks and jumps from independent sub-streams of a path's stream.
pub struct StreamDraws {
    clocks: ChaCha8Rng,
    jumps: ChaCha8Rng,
}

impl StreamDraws {
    pub fn new(stream: RngStream) -> Self {
        Self {
            clocks: stream.substream(tags::CLOCKS).rng(),
            jumps: stream.substream(tags::JUMPS).rng(),
        }
    }
}

impl Draws for StreamDraws {
    fn clock(&mut self) -> Option<f64> {
        Some(Exp1.sample(&mut self.clocks))
    }

    fn jump(&mut self, nu: &JumpDistribution) -> usize {
        let u: f64 = self.jumps.random();
        nu.index_for_uniform(u)
    }
}

/// Prescribed clocks; jump indices cycle through `jumps` (atom 0 if empty).
#[derive(Debug, Clone)]
pub struct FixedDraws {
    clocks: std::vec::IntoIter<f64>,
    jumps: Vec<usize>,
    next_jump: usize,
}

impl FixedDraws {
    pub fn new(clocks: Vec<f64>, jumps: Vec<usize>) -> Self {
        Self {
            clocks: clocks.into_iter(),
            jumps,
            next_jump: 0,
        }
    }
}

impl Draws for FixedDraws {
    fn clock(&mut self) -> Option<f64> {
        self.clocks.next()
    }

    fn jump(&mut self, _nu: &JumpDistribution) -> usize {
        let j = self.jumps.get(self.next_jump).copied().unwrap_or(0);
        self.next_jump += 1;
        j
    }
}

/// Everything the Cox construction needs besides the random draws.
#[derive(Debug, Clone, Copy)]
pub struct CoxInputs<'a> {
    pub gamma: &'a GammaFamily,
    pub lambda: &'a IntensitySpec,
    pub nu: &'a JumpDistribution,
    pub lattice: &'a StateLattice,
}

impl<'a> CoxInputs<'a> {
    pub fn check(&self, grid: &TimeGrid) -> Result<()> {
        let n = self.lattice.len();
        if self.gamma.len() != n || self.lambda.n_states() != n {
            return Err(Error::Inconsistent(format!(
                "lattice has {n} states, gamma {}, lambda {}",
                self.gamma.len(),
                self.lambda.n_states()
            )));
        }
        if self.gamma.grid() != grid || self.lambda.grid() != grid {
            return Err(Error::Inconsistent("grids differ between eta, gamma and lambda".into()));
        }
        Ok(())
    }

    /// LSI intensity `eta_i lambda_i(x) / gamma_x,i` on cell `i`.
    #[inline]
    pub fn rate(&self, eta: &EtaPath, ordinal: usize, cell: usize) -> f64 {
        eta.values[cell] * self.lambda.lambda[ordinal].cell(cell) / self.gamma.gamma[ordinal].cell(cell)
    }
}

/// Time at which `int_start^t rate(cell) dt` reaches `clock`, walking cells
/// from `start`; `None` if it does not happen before the grid horizon.
pub fn invert_clock(grid: &TimeGrid, start: f64, clock: f64, rate: impl Fn(usize) -> f64) -> Option<f64> {
    let n = grid.n_steps();
    let mut t = start;
    let mut remaining = clock;
    let mut cell = grid.raw_cell(start);
    while cell < n {
        let r = rate(cell);
        let end = grid.node(cell + 1);
        let capacity = (end - t) * r;
        if capacity >= remaining {
            return Some(t + remaining / r);
        }
        remaining -= capacity;
        t = end;
        cell += 1;
    }
    None
}

pub fn cox_simulate(eta: &EtaPath, inputs: &CoxInputs, draws: &mut impl Draws) -> Result<JumpPath> {
    let grid = eta.grid;
    inputs.check(&grid)?;
    let mut path = JumpPath::empty(grid.horizon());
    let mut t = 0.0;
    let mut state = 0usize;
    while let Some(clock) = draws.clock() {
        let Some(tau) = invert_clock(&grid, t, clock, |c| inputs.rate(eta, state, c)) else {
            break;
        };
        if tau > grid.horizon() {
            break;
        }
        let j = draws.jump(inputs.nu);
        let size = inputs.nu.atoms()[j];
        match inputs.lattice.successor(state, j) {
            Some(next) => {
                path.times.push(tau);
                path.sizes.push(size);
                path.atom_indices.push(j);
                path.states_after.push(next);
                state = next;
                t = tau;
            }
            None => {
                let exit_value = inputs.lattice.state(state) + size;
                return Err(Error::LatticeExit {
                    partial: Box::new(path),
                    exit_value,
                });
            }
        }
    }
    Ok(path)
}

/// `int_a^b eta_s lambda(s, X_{s-}) / gamma_{X_{s-}}(s) ds` along `path`.
pub fn integrated_intensity(path: &JumpPath, eta: &EtaPath, inputs: &CoxInputs, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let grid = eta.grid;
    let mut total = 0.0;
    let mut seg_start = 0.0f64;
    for k in 0..=path.len() {
        let seg_end = path.times.get(k).copied().unwrap_or(f64::INFINITY);
        let lo = seg_start.max(a);
        let hi = seg_end.min(b);
        if hi > lo {
            let state = path.state_before(k);
            total += integrate_cells(&grid, lo, hi, |c| inputs.rate(eta, state, c));
        }
        if seg_end >= b {
            break;
        }
        seg_start = seg_end;
    }
    total
}

/// Compensator increments between consecutive jumps, with the jump sizes.
pub fn extract_clocks(path: &JumpPath, eta: &EtaPath, inputs: &CoxInputs) -> Vec<(f64, f64)> {
    let mut prev = 0.0;
    path.times
        .iter()
        .zip(&path.sizes)
        .map(|(&tau, &size)| {
            let e = integrated_intensity(path, eta, inputs, prev, tau);
            prev = tau;
            (e, size)
        })
        .collect()
}

/// Compensator accumulated after the last jump up to `T` (the censored piece).
pub fn censored_remainder(path: &JumpPath, eta: &EtaPath, inputs: &CoxInputs) -> f64 {
    let last = path.times.last().copied().unwrap_or(0.0);
    integrated_intensity(path, eta, inputs, last, path.horizon)
}

/// A batch of simulated LSI paths with their `eta` paths.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub eta: Vec<EtaPath>,
    pub paths: Vec<JumpPath>,
    /// Path ids (stream ids) of paths, aligned with `paths`.
    pub ids: Vec<u64>,
    /// Number of paths that left the lattice and were discarded.
    pub flagged: usize,
    pub requested: usize,
}

impl Ensemble {
    pub fn flagged_rate(&self) -> f64 {
        self.flagged as f64 / self.requested.max(1) as f64
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Simulates `n` paths; path `p` uses stream `p` of `stream` (eta from its
/// ETA sub-stream, clocks and jumps from theirs).
pub fn simulate_ensemble(
    model: &EtaModel,
    bounds: &Bounds,
    grid: &TimeGrid,
    inputs: &CoxInputs,
    n: usize,
    stream: RngStream,
) -> Result<Ensemble> {
    inputs.check(grid)?;
    let results: Vec<(EtaPath, Result<JumpPath>)> = (0..n as u64)
        .into_par_iter()
        .map(|p| {
            let s = stream.stream(p);
            let eta = model.sample(bounds, grid, s.substream(tags::ETA));
            let path = cox_simulate(&eta, inputs, &mut StreamDraws::new(s));
            (eta, path)
        })
        .collect();
    let mut ensemble = Ensemble {
        eta: Vec::with_capacity(n),
        paths: Vec::with_capacity(n),
        ids: Vec::with_capacity(n),
        flagged: 0,
        requested: n,
    };
    for (p, (eta, path)) in results.into_iter().enumerate() {
        match path {
            Ok(path) => {
                ensemble.eta.push(eta);
                ensemble.paths.push(path);
                ensemble.ids.push(p as u64);
            }
            Err(Error::LatticeExit { .. }) => ensemble.flagged += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(ensemble)
}
