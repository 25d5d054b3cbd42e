//! Noise-free reference fixed points for finite `eta` laws.
//!
//! When `eta` takes finitely many paths, the conditional law of `X` given
//! each path is a time-inhomogeneous Markov chain, so both `f` and `g` are
//! finite sums of deterministic quantities. Two independent evaluations are
//! provided: the iterated-integral word terms for counting processes and
//! the lattice forward equation for general jump laws.

use crate::cox::{GammaFamily, IntensitySpec};
use crate::error::{Error, Result};
use crate::eta::EtaPath;
use crate::fp_counting::SolverSettings;
use crate::fp_general::theta_xi;
use crate::grid::{Bounds, GridFunction, TimeGrid};
use crate::jumps::JumpDistribution;
use crate::li_model::ForwardChain;
use crate::lattice::StateLattice;

/// Default grid resolution for oracle solves.
pub const ORACLE_STEPS: usize = 4096;

/// Counting fixed point level by level using the iterated-integral terms of
/// the all-ones words.
pub fn counting_oracle(
    law: &[(EtaPath, f64)],
    lambda: &IntensitySpec,
    bounds: &Bounds,
    max_level: usize,
    settings: &SolverSettings,
    substeps: usize,
) -> Result<GammaFamily> {
    let grid = *lambda.grid();
    let mids: Vec<f64> = (0..grid.n_steps()).map(|i| grid.midpoint(i)).collect();
    let mut family = GammaFamily {
        states: (0..=max_level).map(|x| x as f64).collect(),
        gamma: Vec::new(),
    };
    for m in 0..=max_level {
        family.gamma.push(GridFunction::constant(grid, bounds.midpoint()));
        let states: Vec<usize> = (0..=m).collect();
        let mut converged = false;
        let mut trace = Vec::new();
        for _ in 0..settings.max_iter {
            let mut f = vec![0.0; grid.n_steps()];
            let mut g = vec![0.0; grid.n_steps()];
            for (eta, p) in law {
                for (i, v) in theta_xi(&states, &family, lambda, eta, &mids, substeps).iter().enumerate() {
                    f[i] += p * v.f();
                    g[i] += p * v.g();
                }
            }
            let current = &family.gamma[m];
            let next: Vec<f64> = (0..grid.n_steps())
                .map(|i| if g[i] > 0.0 { bounds.clamp(f[i] / g[i]) } else { current.cell(i) })
                .collect();
            let next = GridFunction::new(grid, next)?;
            let residual = next.weighted_sup_distance(current, 0.0);
            trace.push(residual);
            family.gamma[m] = next;
            if residual <= settings.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                scope: format!("oracle level {m}"),
                iterations: settings.max_iter,
                last_residual: trace.last().copied().unwrap_or(f64::NAN),
                trace,
                best: Some(Box::new(family)),
            });
        }
    }
    Ok(family)
}

/// `P(X_{t-} = x | eta = path)` at every cell midpoint for given leverages.
pub fn conditional_pmf_at_midpoints(
    chain: ForwardChain,
    eta: &EtaPath,
    lambda: &IntensitySpec,
    gamma: &GammaFamily,
) -> Vec<Vec<f64>> {
    let grid = eta.grid;
    let n_states = chain.lattice.len();
    let mut p = chain.initial();
    let mut leak = 0.0;
    let mut rates = vec![0.0; n_states];
    let mut out = Vec::with_capacity(grid.n_steps());
    for i in 0..grid.n_steps() {
        for (x, r) in rates.iter_mut().enumerate() {
            *r = eta.values[i] * lambda.lambda[x].cell(i) / gamma.gamma[x].cell(i);
        }
        chain.advance(&mut p, &mut leak, &rates, 0.5 * grid.step());
        out.push(p.clone());
        chain.advance(&mut p, &mut leak, &rates, grid.node(i + 1) - grid.midpoint(i));
    }
    out
}

/// General fixed point from the forward equation of each `eta` branch,
/// iterated simultaneously with the given damping.
pub fn lattice_oracle(
    law: &[(EtaPath, f64)],
    lambda: &IntensitySpec,
    nu: &JumpDistribution,
    lattice: &StateLattice,
    bounds: &Bounds,
    settings: &SolverSettings,
) -> Result<GammaFamily> {
    let grid: TimeGrid = *lambda.grid();
    let chain = ForwardChain { lattice, nu };
    let n_states = lattice.len();
    let mut gamma = GammaFamily::constant(lattice, grid, bounds.midpoint());
    let mut trace = Vec::new();
    for _ in 0..settings.max_iter {
        let mut f = vec![vec![0.0; grid.n_steps()]; n_states];
        let mut g = vec![vec![0.0; grid.n_steps()]; n_states];
        for (eta, w) in law {
            let pmf = conditional_pmf_at_midpoints(chain, eta, lambda, &gamma);
            for (i, p) in pmf.iter().enumerate() {
                for x in 0..n_states {
                    f[x][i] += w * eta.values[i] * p[x];
                    g[x][i] += w * p[x];
                }
            }
        }
        let mut residual = 0.0f64;
        let mut next = gamma.clone();
        for x in 0..n_states {
            let values = next.gamma[x].values_mut();
            for i in 0..grid.n_steps() {
                if g[x][i] > 1e-290 {
                    let update = bounds.clamp(f[x][i] / g[x][i]);
                    values[i] = (1.0 - settings.damping) * values[i] + settings.damping * update;
                }
            }
            residual = residual.max(next.gamma[x].weighted_sup_distance(&gamma.gamma[x], 0.0));
        }
        trace.push(residual);
        gamma = next;
        if residual <= settings.tol {
            return Ok(gamma);
        }
    }
    Err(Error::NonConvergence {
        scope: "lattice oracle".into(),
        iterations: settings.max_iter,
        last_residual: trace.last().copied().unwrap_or(f64::NAN),
        trace,
        best: Some(Box::new(gamma)),
    })
}

/// Largest change of `curve` within `cells` cells of `grid` around `t`
/// (the discretization allowance when comparing against a coarser grid).
pub fn drift_allowance(curve: &GridFunction, t: f64, width: f64) -> f64 {
    let grid = curve.grid();
    let center = curve.eval(t).unwrap_or(f64::NAN);
    let lo = (t - width).max(0.0);
    let hi = (t + width).min(grid.horizon());
    let a = grid.cell_of(lo);
    let b = grid.cell_of(hi);
    curve.values()[a..=b]
        .iter()
        .map(|v| (v - center).abs())
        .fold(0.0, f64::max)
}
