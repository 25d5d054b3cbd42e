//! Intensity bounds, uniform time grids and piecewise-constant grid functions.
//!
//! A [`GridFunction`] holds one value per cell `[t_i, t_{i+1})`. Integrals of
//! products of grid functions are exact left-Riemann sums because every
//! integrand is constant on a cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intensity band `0 < L < U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && upper > lower && upper.is_finite()) {
            return Err(Error::InvalidBounds { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    /// `L^2 / U`, the smallest possible LSI intensity `eta * lambda / gamma`.
    pub fn min_rate(&self) -> f64 {
        self.lower * self.lower / self.upper
    }

    /// `U^2 / L`, the largest possible LSI intensity.
    pub fn max_rate(&self) -> f64 {
        self.upper * self.upper / self.lower
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    /// Contraction constant `C(T) = 2 U^3 e^{(U^2/L) T} / L^2` of the counting fixed-point map.
    pub fn contraction_constant(&self, horizon: f64) -> f64 {
        2.0 * self.upper.powi(3) * (self.max_rate() * horizon).exp() / (self.lower * self.lower)
    }

    /// Weight rate `a = 2 C(T)` under which the counting map contracts with factor 1/2.
    pub fn contraction_weight_rate(&self, horizon: f64) -> f64 {
        2.0 * self.contraction_constant(horizon)
    }
}

/// Uniform discretization of `[0, T]` into `n_steps` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || n_steps == 0 {
            return Err(Error::InvalidGrid { horizon, n_steps });
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `t_i = i * step`, `i = 0..=n_steps`.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(|i| self.node(i))
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.step()
    }

    /// Cell index `i` with `t in [t_i, t_{i+1})`; `t = T` maps to the last cell.
    ///
    /// Times within a relative `1e-9` of a node are snapped onto it so that
    /// `cell_of(node(i)) == i` despite rounding.
    pub fn cell_of(&self, t: f64) -> usize {
        let x = t / self.step();
        let snapped = x.round();
        let idx = if (x - snapped).abs() <= 1e-9 * snapped.max(1.0) {
            snapped
        } else {
            x.floor()
        };
        (idx.max(0.0) as usize).min(self.n_steps - 1)
    }

    /// `floor(t / step)` without snapping, clamped to the last cell.
    ///
    /// Used for integration, where a time sitting on a node contributes a
    /// zero-length piece to the left cell either way.
    pub fn raw_cell(&self, t: f64) -> usize {
        ((t / self.step()).floor().max(0.0) as usize).min(self.n_steps - 1)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Index of the node equal to `t` (within rounding), if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.step();
        let r = x.round();
        ((x - r).abs() <= 1e-9 * r.max(1.0) && r >= 0.0 && r as usize <= self.n_steps)
            .then_some(r as usize)
    }
}

/// Piecewise-constant function on a [`TimeGrid`], one value per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_steps() {
            return Err(Error::GridLength {
                expected: grid.n_steps(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_steps()],
        }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n_steps()).map(|i| f(grid.node(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn cell(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        self.grid.check_time(t)?;
        Ok(self.values[self.grid.cell_of(t)])
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        integrate_cells(&self.grid, a, b, |i| self.values[i])
    }

    pub fn check_bounds(&self, bounds: &Bounds, what: &str) -> Result<()> {
        let slack = 1e-12 * bounds.upper;
        for &v in &self.values {
            if !(v >= bounds.lower - slack && v <= bounds.upper + slack) {
                return Err(Error::OutOfBounds {
                    what: what.to_string(),
                    value: v,
                    lower: bounds.lower,
                    upper: bounds.upper,
                });
            }
        }
        Ok(())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sup-norm distance, optionally weighted by `e^{-a t}` at each cell's midpoint.
    pub fn weighted_sup_distance(&self, other: &GridFunction, rate: f64) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .enumerate()
            .map(|(i, (x, y))| (-rate * self.grid.midpoint(i)).exp() * (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Exact integral over `[a, b]` of a per-cell constant integrand.
pub fn integrate_cells(grid: &TimeGrid, a: f64, b: f64, value: impl Fn(usize) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = grid.step();
    let first = grid.raw_cell(a);
    let last = grid.raw_cell(b).max(first);
    if first == last {
        return (b - a) * value(first);
    }
    let mut total = (grid.node(first + 1) - a) * value(first);
    for i in first + 1..last {
        total += h * value(i);
    }
    total + (b - grid.node(last)) * value(last)
}
