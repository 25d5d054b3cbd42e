//! Local intensity reference model: exact one-dimensional marginals.
//!
//! The LI process jumps at rate `lambda(t, x)` with sizes from `nu`, so its
//! pmf on the lattice solves the forward equation
//! `p_x' = sum_j nu_j lambda(t, x - a_j) p_{x - a_j} - lambda(t, x) p_x`.
//! Mass that would jump off the truncated lattice is tracked as leak.

use serde::{Deserialize, Serialize};

use crate::cox::{IntensitySpec, JumpPath};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::jumps::JumpDistribution;
use crate::lattice::StateLattice;
use crate::stats;

/// Largest `rate * step` taken by the RK4 integrator.
pub const MAX_RATE_STEP: f64 = 0.025;

/// Forward-equation integrator on a lattice with per-state jump rates.
#[derive(Debug, Clone, Copy)]
pub struct ForwardChain<'a> {
    pub lattice: &'a StateLattice,
    pub nu: &'a JumpDistribution,
}

impl ForwardChain<'_> {
    fn derivative(&self, p: &[f64], rates: &[f64], out: &mut [f64]) -> f64 {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut leak = 0.0;
        for x in 0..p.len() {
            let flow = rates[x] * p[x];
            if flow == 0.0 {
                continue;
            }
            out[x] -= flow;
            for (j, &q) in self.nu.probs().iter().enumerate() {
                match self.lattice.successor(x, j) {
                    Some(y) => out[y] += q * flow,
                    None => leak += q * flow,
                }
            }
        }
        leak
    }

    fn rk4(&self, p: &mut [f64], leak: &mut f64, rates: &[f64], dt: f64) {
        let n = p.len();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let l1 = self.derivative(p, rates, &mut k1);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * dt * k1[i];
        }
        let l2 = self.derivative(&tmp, rates, &mut k2);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * dt * k2[i];
        }
        let l3 = self.derivative(&tmp, rates, &mut k3);
        for i in 0..n {
            tmp[i] = p[i] + dt * k3[i];
        }
        let l4 = self.derivative(&tmp, rates, &mut k4);
        for i in 0..n {
            p[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        *leak += dt / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
    }

    /// Integrates over `duration` with constant `rates`.
    pub fn advance(&self, p: &mut [f64], leak: &mut f64, rates: &[f64], duration: f64) {
        if duration <= 0.0 {
            return;
        }
        let max_rate = rates.iter().copied().fold(0.0, f64::max);
        let n_sub = (max_rate * duration / MAX_RATE_STEP).ceil().max(1.0) as usize;
        let dt = duration / n_sub as f64;
        for _ in 0..n_sub {
            self.rk4(p, leak, rates, dt);
        }
    }

    pub fn initial(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.lattice.len()];
        p[0] = 1.0;
        p
    }
}

/// Law of the LI process at every grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCurve {
    pub grid: TimeGrid,
    pub states: Vec<f64>,
    /// `pmf[i][x]` is `P(X_{t_i} = state x)`, clipped at 0.
    pub pmf: Vec<Vec<f64>>,
    /// Mass lost to lattice truncation by each node.
    pub leak: Vec<f64>,
}

impl MarginalCurve {
    pub fn pmf_at(&self, t: f64) -> Result<&[f64]> {
        let i = self
            .grid
            .node_index(t)
            .ok_or_else(|| Error::Inconsistent(format!("time {t} is not a grid node")))?;
        Ok(&self.pmf[i])
    }

    pub fn leak_at(&self, t: f64) -> Result<f64> {
        let i = self
            .grid
            .node_index(t)
            .ok_or_else(|| Error::Inconsistent(format!("time {t} is not a grid node")))?;
        Ok(self.leak[i])
    }
}

pub fn li_forward_marginals(
    lambda: &IntensitySpec,
    nu: &JumpDistribution,
    lattice: &StateLattice,
    grid: &TimeGrid,
    leak_tolerance: f64,
) -> Result<MarginalCurve> {
    if lambda.n_states() != lattice.len() || lambda.grid() != grid {
        return Err(Error::Inconsistent("lambda does not match lattice/grid".into()));
    }
    let chain = ForwardChain { lattice, nu };
    let mut p = chain.initial();
    let mut leak = 0.0;
    let mut pmf = vec![p.clone()];
    let mut leaks = vec![0.0];
    let mut rates = vec![0.0; lattice.len()];
    for i in 0..grid.n_steps() {
        for (x, r) in rates.iter_mut().enumerate() {
            *r = lambda.lambda[x].cell(i);
        }
        chain.advance(&mut p, &mut leak, &rates, grid.step());
        if leak > leak_tolerance {
            return Err(Error::MassLeak {
                t: grid.node(i + 1),
                leak,
                tolerance: leak_tolerance,
            });
        }
        pmf.push(p.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect());
        leaks.push(leak);
    }
    Ok(MarginalCurve {
        grid: *grid,
        states: lattice.states().to_vec(),
        pmf,
        leak: leaks,
    })
}

/// Empirical-vs-reference comparison of `X_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalDistance {
    pub tv: f64,
    pub chi2: f64,
    pub dof: usize,
    pub chi2_pvalue: f64,
    pub n: usize,
}

/// Empirical pmf of `X_t` over lattice ordinals.
pub fn empirical_pmf(paths: &[JumpPath], n_states: usize, t: f64) -> Vec<usize> {
    let mut counts = vec![0usize; n_states];
    for p in paths {
        counts[p.ordinal_at(t)] += 1;
    }
    counts
}

pub fn marginal_distance(paths: &[JumpPath], curve: &MarginalCurve, t: f64) -> Result<MarginalDistance> {
    if paths.len() < 100 {
        return Err(Error::InsufficientData {
            what: "paths for marginal comparison".into(),
            needed: 100,
            have: paths.len(),
        });
    }
    let pmf = curve.pmf_at(t)?;
    let counts = empirical_pmf(paths, pmf.len(), t);
    Ok(compare_counts(&counts, pmf, &curve.states, curve.leak_at(t)?))
}

/// TV and pooled chi-square between observed counts and reference probabilities.
pub fn compare_counts(counts: &[usize], pmf: &[f64], states: &[f64], leak: f64) -> MarginalDistance {
    let n: usize = counts.iter().sum();
    let nf = n as f64;
    let mut order: Vec<usize> = (0..pmf.len()).collect();
    order.sort_by(|&a, &b| states[a].total_cmp(&states[b]));
    let mut observed: Vec<f64> = order.iter().map(|&x| counts[x] as f64).collect();
    let mut expected: Vec<f64> = order.iter().map(|&x| pmf[x]).collect();
    observed.push(0.0);
    expected.push(leak.max(0.0));
    let tv = 0.5
        * observed
            .iter()
            .zip(&expected)
            .map(|(o, e)| (o / nf - e).abs())
            .sum::<f64>();
    let (chi2, dof, chi2_pvalue) = stats::chi_square_pooled(&observed, &expected, nf);
    MarginalDistance {
        tv,
        chi2,
        dof,
        chi2_pvalue,
        n,
    }
}
