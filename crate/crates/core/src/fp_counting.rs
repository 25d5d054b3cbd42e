//! Level-by-level fixed point for counting processes.
//!
//! For each level `m` the leverage `gamma_m(t) = E[eta_t | X_{t-} = m]` solves
//! `gamma_m = f_m(gamma_m) / g_m(gamma_m)` with
//!
//! ```text
//! f_m(t) = E[eta_t 1{tau_m < t} exp(-int_{tau_m}^t eta lambda(., m) / gamma_m)]
//! g_m(t) = E[      1{tau_m < t} exp(-int_{tau_m}^t eta lambda(., m) / gamma_m)]
//! ```
//!
//! where `tau_m` only depends on the already solved `gamma_0..gamma_{m-1}`.
//! Expectations are Monte Carlo averages over a fixed sample set (common
//! random numbers), so Picard iteration acts on a deterministic map.

use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox::{invert_clock, GammaFamily, IntensitySpec};
use crate::error::{Error, Result};
use crate::eta::{EtaModel, EtaPath};
use crate::grid::{Bounds, GridFunction, TimeGrid};
use crate::jumps::JumpDistribution;
use crate::lattice::{auto_depth, StateLattice};
use crate::parallel::{chunked_sum, CHUNK};
use crate::rng::{tags, RngStream};

/// Tail probability used when the truncation depth is chosen automatically.
pub const DEFAULT_TAIL: f64 = 1e-6;

/// One Monte Carlo replicate: an `eta` path and clocks `E_1..E_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub eta: EtaPath,
    pub clocks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    /// Sample `p` takes `eta` from the ETA and clocks from the CLOCKS
    /// sub-stream of stream `p`.
    pub fn draw(
        model: &EtaModel,
        bounds: &Bounds,
        grid: &TimeGrid,
        n: usize,
        n_clocks: usize,
        stream: RngStream,
    ) -> Self {
        let samples = (0..n)
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|p| {
                let s = stream.stream(p as u64);
                let eta = model.sample(bounds, grid, s.substream(tags::ETA));
                let mut rng = s.substream(tags::CLOCKS).rng();
                let clocks = (0..n_clocks).map(|_| Exp1.sample(&mut rng)).collect();
                Sample { eta, clocks }
            })
            .collect();
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Calls `visit(i, exp(-int_start^{mid_i} rate))` for every cell whose
/// midpoint lies strictly after `start`.
#[inline]
pub(crate) fn for_each_survival(
    grid: &TimeGrid,
    start: f64,
    rate: impl Fn(usize) -> f64,
    mut visit: impl FnMut(usize, f64),
) {
    let n = grid.n_steps();
    let h = grid.step();
    let first = grid.raw_cell(start);
    let r0 = rate(first);
    let mid0 = grid.midpoint(first);
    if mid0 > start {
        visit(first, (-(mid0 - start) * r0).exp());
    }
    let mut at_node = (grid.node(first + 1) - start).max(0.0) * r0;
    for i in first + 1..n {
        let r = rate(i);
        visit(i, (-(at_node + 0.5 * h * r)).exp());
        at_node += h * r;
    }
}

/// Monte Carlo estimates of `f` and `g` at cell midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct FgEstimate {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl FgEstimate {
    /// First cell with positive mass.
    pub fn support_start(&self) -> Option<usize> {
        self.g.iter().position(|&g| g > 0.0)
    }
}

/// New iterate from an estimate: `f/g` clamped to `[L, U]`, leading cells
/// without mass copied from the first supported cell.
///
/// Returns the iterate and the largest distance moved by clamping.
pub fn picard_update(est: &FgEstimate, bounds: &Bounds, grid: &TimeGrid, state: usize) -> Result<(Vec<f64>, f64)> {
    let start = est.support_start().ok_or(Error::InsufficientMass {
        state,
        first_t: grid.horizon(),
    })?;
    let mut clamp = 0.0f64;
    let mut out = vec![0.0; est.f.len()];
    for i in start..out.len() {
        let raw = est.f[i] / est.g[i];
        let c = bounds.clamp(raw);
        clamp = clamp.max((raw - c).abs());
        out[i] = c;
    }
    let first = out[start];
    out[..start].iter_mut().for_each(|v| *v = first);
    Ok((out, clamp))
}

/// `tau_m` for every sample, given `gamma_0..gamma_{m-1}`; `None` when
/// `tau_m` falls after the horizon.
pub fn level_start_times(
    m: usize,
    gamma_prior: &[GridFunction],
    lambda: &IntensitySpec,
    samples: &SampleSet,
) -> Vec<Option<f64>> {
    let mut starts = vec![Some(0.0); samples.len()];
    for level in 0..m {
        starts = advance_start_times(level, &starts, &gamma_prior[level], lambda, samples);
    }
    starts
}

/// `tau_{m+1}` from `tau_m` using the solved `gamma_m`.
pub fn advance_start_times(
    m: usize,
    starts: &[Option<f64>],
    gamma_m: &GridFunction,
    lambda: &IntensitySpec,
    samples: &SampleSet,
) -> Vec<Option<f64>> {
    let grid = *gamma_m.grid();
    let lam = lambda.lambda[m].values();
    let gam = gamma_m.values();
    starts
        .par_iter()
        .with_min_len(CHUNK)
        .zip(&samples.samples)
        .map(|(start, s)| {
            let start = (*start)?;
            let eta = &s.eta.values;
            invert_clock(&grid, start, s.clocks[m], |c| eta[c] * lam[c] / gam[c]).filter(|&t| t < grid.horizon())
        })
        .collect()
}

/// Estimates `f_m`, `g_m` at `candidate` from samples whose level-`m`
/// entry times are `starts`.
pub fn estimate_fg(
    lambda_m: &GridFunction,
    candidate: &GridFunction,
    samples: &SampleSet,
    starts: &[Option<f64>],
) -> FgEstimate {
    let grid = *candidate.grid();
    let n = grid.n_steps();
    let lam = lambda_m.values();
    let gam = candidate.values();
    let sums = chunked_sum(samples.len(), 2 * n, |range, acc| {
        for p in range {
            let Some(start) = starts[p] else { continue };
            let eta = &samples.samples[p].eta.values;
            let (f, g) = acc.split_at_mut(n);
            for_each_survival(&grid, start, |c| eta[c] * lam[c] / gam[c], |i, c| {
                f[i] += eta[i] * c;
                g[i] += c;
            });
        }
    });
    let scale = 1.0 / samples.len().max(1) as f64;
    FgEstimate {
        f: sums[..n].iter().map(|v| v * scale).collect(),
        g: sums[n..].iter().map(|v| v * scale).collect(),
    }
}

/// Delta-method standard error of the ratio `f/g` per cell at `gamma`.
pub fn ratio_std_error(
    lambda_m: &GridFunction,
    gamma: &GridFunction,
    samples: &SampleSet,
    starts: &[Option<f64>],
) -> Vec<f64> {
    let grid = *gamma.grid();
    let n = grid.n_steps();
    let lam = lambda_m.values();
    let gam = gamma.values();
    let est = estimate_fg(lambda_m, gamma, samples, starts);
    let ratio: Vec<f64> = est
        .f
        .iter()
        .zip(&est.g)
        .map(|(f, g)| if *g > 0.0 { f / g } else { 0.0 })
        .collect();
    let sq = chunked_sum(samples.len(), n, |range, acc| {
        for p in range {
            let Some(start) = starts[p] else { continue };
            let eta = &samples.samples[p].eta.values;
            for_each_survival(&grid, start, |c| eta[c] * lam[c] / gam[c], |i, c| {
                let d = c * (eta[i] - ratio[i]);
                acc[i] += d * d;
            });
        }
    });
    let n_samples = samples.len().max(1) as f64;
    sq.iter()
        .zip(&est.g)
        .map(|(s, g)| if *g > 0.0 { s.sqrt() / (g * n_samples) } else { f64::INFINITY })
        .collect()
}

/// Stopping controls shared by the fixed-point solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Damping for the simultaneous solver; 1 means plain Picard.
    #[serde(default = "default_damping")]
    pub damping: f64,
}

fn default_damping() -> f64 {
    0.5
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 200,
            damping: default_damping(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountingFpProblem {
    pub eta_model: EtaModel,
    pub lambda: IntensitySpec,
    pub bounds: Bounds,
    pub grid: TimeGrid,
    pub mc_paths: usize,
    pub max_level: usize,
}

impl CountingFpProblem {
    /// `max_level = None` picks `K` by the Poisson tail rule; `lambda_of`
    /// gives `lambda(., k)` for each level.
    pub fn new(
        eta_model: EtaModel,
        bounds: Bounds,
        grid: TimeGrid,
        mc_paths: usize,
        max_level: Option<usize>,
        lambda_of: impl Fn(usize) -> GridFunction,
    ) -> Result<Self> {
        let max_level = max_level.unwrap_or_else(|| auto_depth(&bounds, grid.horizon(), DEFAULT_TAIL));
        let lambda = IntensitySpec::new((0..=max_level).map(lambda_of).collect(), bounds)?;
        let problem = Self {
            eta_model,
            lambda,
            bounds,
            grid,
            mc_paths,
            max_level,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.eta_model.validate(&self.bounds)?;
        if self.mc_paths < 1000 {
            return Err(Error::config("solver.mc_paths", "need at least 1000 Monte Carlo paths"));
        }
        if self.lambda.n_states() != self.max_level + 1 {
            return Err(Error::Inconsistent(format!(
                "lambda covers {} levels, K = {}",
                self.lambda.n_states(),
                self.max_level
            )));
        }
        if self.lambda.grid() != &self.grid {
            return Err(Error::Inconsistent("lambda grid differs from problem grid".into()));
        }
        Ok(())
    }

    pub fn lattice(&self) -> StateLattice {
        StateLattice::build(&JumpDistribution::unit(), self.max_level).expect("K >= 1")
    }

    pub fn draw_samples(&self, stream: RngStream) -> SampleSet {
        SampleSet::draw(
            &self.eta_model,
            &self.bounds,
            &self.grid,
            self.mc_paths,
            self.max_level + 1,
            stream,
        )
    }
}

/// Outcome of one level's Picard iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSolution {
    pub gamma: GridFunction,
    pub residual: f64,
    /// Picard updates before the residual test passed.
    pub iterations: usize,
    /// Unweighted sup residual per map evaluation.
    pub trace: Vec<f64>,
    /// Residual in the `e^{-a t}` weighted norm, `a = 2 C(T)`.
    pub weighted_trace: Vec<f64>,
    pub std_error: Vec<f64>,
    pub support_start: usize,
    pub clamp_distance: f64,
}

pub fn solve_level(
    m: usize,
    starts: &[Option<f64>],
    problem: &CountingFpProblem,
    samples: &SampleSet,
    settings: &SolverSettings,
) -> Result<LevelSolution> {
    let grid = problem.grid;
    let bounds = problem.bounds;
    let rate = bounds.contraction_weight_rate(grid.horizon());
    let lambda_m = &problem.lambda.lambda[m];
    let mut gamma = GridFunction::constant(grid, bounds.midpoint());
    let mut trace = Vec::new();
    let mut weighted_trace = Vec::new();
    let mut clamp_distance = 0.0f64;
    for j in 0..settings.max_iter {
        let est = estimate_fg(lambda_m, &gamma, samples, starts);
        let (next, clamp) = picard_update(&est, &bounds, &grid, m)?;
        let next = GridFunction::new(grid, next)?;
        clamp_distance = clamp_distance.max(clamp);
        let residual = next.weighted_sup_distance(&gamma, 0.0);
        trace.push(residual);
        weighted_trace.push(next.weighted_sup_distance(&gamma, rate));
        let support_start = est.support_start().unwrap_or(0);
        gamma = next;
        if residual <= settings.tol {
            return Ok(LevelSolution {
                std_error: ratio_std_error(lambda_m, &gamma, samples, starts),
                gamma,
                residual,
                iterations: j,
                trace,
                weighted_trace,
                support_start,
                clamp_distance,
            });
        }
    }
    Err(Error::NonConvergence {
        scope: format!("level {m}"),
        iterations: settings.max_iter,
        last_residual: trace.last().copied().unwrap_or(f64::NAN),
        trace,
        best: None,
    })
}

/// Solution of either fixed-point system, indexed by lattice ordinal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpSolution {
    pub gamma: GammaFamily,
    /// Final unweighted residual per state.
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Residual traces: one per level (counting) or one for the whole system.
    pub traces: Vec<Vec<f64>>,
    pub weighted_traces: Vec<Vec<f64>>,
    /// Ratio standard error per state and cell at the solution.
    pub std_errors: Vec<Vec<f64>>,
    pub support_start: Vec<Option<usize>>,
    /// Ordinals that received no Monte Carlo mass and were copied from a neighbour.
    pub unsupported: Vec<usize>,
    pub clamp_distance: f64,
    #[serde(default)]
    pub restarts: Vec<RestartSummary>,
}

/// One restart of the simultaneous solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub initial: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Sup distance to the reported solution.
    pub distance: f64,
}

impl FpSolution {
    /// Largest geometric decay factor observed across the traces.
    pub fn contraction_factor(&self, floor: f64) -> Option<f64> {
        self.weighted_traces
            .iter()
            .filter_map(|t| observed_contraction_factor(t, floor))
            .reduce(f64::max)
    }
}

/// Geometric-mean ratio of successive residuals over the second half of
/// the entries above `floor` (the asymptotic regime).
pub fn observed_contraction_factor(trace: &[f64], floor: f64) -> Option<f64> {
    let usable: Vec<f64> = trace.iter().copied().take_while(|&r| r > floor).collect();
    if usable.len() < 3 {
        return None;
    }
    let tail = &usable[usable.len() / 2..];
    let tail = if tail.len() < 2 { &usable[usable.len() - 2..] } else { tail };
    let steps = (tail.len() - 1) as f64;
    Some((tail[tail.len() - 1] / tail[0]).powf(1.0 / steps))
}

pub fn solve_all_levels(problem: &CountingFpProblem, settings: &SolverSettings, stream: RngStream) -> Result<FpSolution> {
    problem.validate()?;
    let samples = problem.draw_samples(stream);
    solve_all_levels_with(problem, &samples, settings)
}

pub fn solve_all_levels_with(
    problem: &CountingFpProblem,
    samples: &SampleSet,
    settings: &SolverSettings,
) -> Result<FpSolution> {
    let k = problem.max_level;
    let mut solution = FpSolution {
        gamma: GammaFamily {
            states: (0..=k).map(|x| x as f64).collect(),
            gamma: Vec::with_capacity(k + 1),
        },
        residuals: Vec::new(),
        iterations: Vec::new(),
        traces: Vec::new(),
        weighted_traces: Vec::new(),
        std_errors: Vec::new(),
        support_start: Vec::new(),
        unsupported: Vec::new(),
        clamp_distance: 0.0,
        restarts: Vec::new(),
    };
    let mut starts = vec![Some(0.0); samples.len()];
    for m in 0..=k {
        match solve_level(m, &starts, problem, samples, settings) {
            Ok(level) => {
                solution.clamp_distance = solution.clamp_distance.max(level.clamp_distance);
                solution.residuals.push(level.residual);
                solution.iterations.push(level.iterations);
                solution.traces.push(level.trace);
                solution.weighted_traces.push(level.weighted_trace);
                solution.std_errors.push(level.std_error);
                solution.support_start.push(Some(level.support_start));
                solution.gamma.gamma.push(level.gamma);
            }
            Err(Error::InsufficientMass { .. }) => {
                let fill = solution
                    .gamma
                    .gamma
                    .last()
                    .cloned()
                    .unwrap_or_else(|| GridFunction::constant(problem.grid, problem.bounds.midpoint()));
                solution.unsupported.push(m);
                solution.residuals.push(0.0);
                solution.iterations.push(0);
                solution.traces.push(Vec::new());
                solution.weighted_traces.push(Vec::new());
                solution.std_errors.push(vec![f64::INFINITY; problem.grid.n_steps()]);
                solution.support_start.push(None);
                solution.gamma.gamma.push(fill);
            }
            Err(Error::NonConvergence {
                scope,
                iterations,
                last_residual,
                trace,
                ..
            }) => {
                return Err(Error::NonConvergence {
                    scope,
                    iterations,
                    last_residual,
                    trace,
                    best: (!solution.gamma.is_empty()).then(|| Box::new(solution.gamma)),
                })
            }
            Err(e) => return Err(e),
        }
        if m < k {
            starts = advance_start_times(m, &starts, &solution.gamma.gamma[m], &problem.lambda, samples);
        }
    }
    Ok(solution)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(model: EtaModel, k: usize, n: usize) -> CountingFpProblem {
        let bounds = Bounds::new(1.0, 2.0).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        CountingFpProblem::new(model, bounds, grid, n, Some(k), |_| GridFunction::constant(grid, 1.0)).unwrap()
    }

    fn two_point() -> EtaModel {
        EtaModel::RandomConstant {
            values: vec![1.0, 2.0],
            probs: vec![0.5, 0.5],
        }
    }

    // closed-form level-0 ratio for eta in {1,2}, lambda = 1, constant candidate c
    fn two_point_level_zero(t: f64, c: f64) -> f64 {
        let a = (-t / c).exp();
        let b = (-2.0 * t / c).exp();
        (a + 2.0 * b) / (a + b)
    }

    #[test]
    fn survival_weights_match_direct_integral() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let rates = [1.0, 2.0, 3.0, 4.0];
        let mut got = [f64::NAN; 4];
        for_each_survival(&grid, 0.1, |c| rates[c], |i, c| got[i] = c);
        assert!((got[0] - (-(0.125 - 0.1) * 1.0f64).exp()).abs() < 1e-15);
        let i2: f64 = 0.15 * 1.0 + 0.25 * 2.0 + 0.125 * 3.0;
        assert!((got[2] - (-i2).exp()).abs() < 1e-15);
        let mut late = [f64::NAN; 4];
        for_each_survival(&grid, 0.2, |c| rates[c], |i, c| late[i] = c);
        assert!(late[0].is_nan());
    }

    #[test]
    fn constant_eta_factors_out() {
        let p = problem(EtaModel::Constant { value: 1.7 }, 3, 1000);
        let samples = p.draw_samples(RngStream::new(1, 0));
        let starts = vec![Some(0.0); samples.len()];
        let est = estimate_fg(&p.lambda.lambda[0], &GridFunction::constant(p.grid, 1.3), &samples, &starts);
        for (f, g) in est.f.iter().zip(&est.g) {
            assert!((f - 1.7 * g).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_eta_all_levels() {
        let p = problem(EtaModel::Constant { value: 1.25 }, 4, 2000);
        let sol = solve_all_levels(&p, &SolverSettings::default(), RngStream::new(4, 0)).unwrap();
        for (m, g) in sol.gamma.gamma.iter().enumerate() {
            assert!(g.values().iter().all(|&v| (v - 1.25).abs() < 1e-12), "level {m}");
        }
        assert_eq!(sol.iterations[0], 1);
        assert!(sol.residuals[0] < 1e-12);
    }

    #[test]
    fn deterministic_eta_is_its_own_projection() {
        let model = EtaModel::DeterministicSinusoid {
            base: 1.5,
            amplitude: 0.4,
            period: 0.7,
        };
        let p = problem(model.clone(), 3, 2000);
        let eta = model.sample(&p.bounds, &p.grid, RngStream::new(0, 0));
        let sol = solve_all_levels(&p, &SolverSettings::default(), RngStream::new(4, 0)).unwrap();
        for (m, g) in sol.gamma.gamma.iter().enumerate() {
            if sol.unsupported.contains(&m) {
                continue;
            }
            let start = sol.support_start[m].unwrap();
            for i in start..p.grid.n_steps() {
                assert!((g.cell(i) - eta.values[i]).abs() < 1e-12, "level {m} cell {i}");
            }
        }
    }

    #[test]
    fn level_zero_matches_two_point_closed_form() {
        let p = problem(two_point(), 2, 20_000);
        let samples = p.draw_samples(RngStream::new(11, 0));
        let starts = vec![Some(0.0); samples.len()];
        let cand = GridFunction::constant(p.grid, 1.5);
        let est = estimate_fg(&p.lambda.lambda[0], &cand, &samples, &starts);
        let se = ratio_std_error(&p.lambda.lambda[0], &cand, &samples, &starts);
        let last = p.grid.n_steps() - 1;
        let t = p.grid.midpoint(last);
        let got = est.f[last] / est.g[last];
        let want = two_point_level_zero(t, 1.5);
        assert!((got - want).abs() < 3.0 * se[last], "{got} vs {want} (se {})", se[last]);
    }

    #[test]
    fn single_jump_level_zero_starts_near_one() {
        let p = |n| {
            let bounds = Bounds::new(1.0, 2.0).unwrap();
            let grid = TimeGrid::new(1.0, n).unwrap();
            CountingFpProblem::new(EtaModel::SingleJump { rate: 1.0 }, bounds, grid, 20_000, Some(2), |_| {
                GridFunction::constant(grid, 1.0)
            })
            .unwrap()
        };
        let mut prev = f64::INFINITY;
        for n in [10, 40, 160] {
            let sol = solve_all_levels(&p(n), &SolverSettings::default(), RngStream::new(5, 0)).unwrap();
            let first = sol.gamma.gamma[0].cell(0);
            assert!(first - 1.0 < prev - 1.0 + 1e-3);
            prev = first;
        }
        assert!(prev - 1.0 < 0.01, "gamma_0(0+) = {prev}");
    }

    #[test]
    fn reruns_are_bit_identical() {
        let p = problem(two_point(), 3, 3000);
        let a = solve_all_levels(&p, &SolverSettings::default(), RngStream::new(9, 0)).unwrap();
        let pool = crate::parallel::pool(Some(3));
        let b = pool
            .install(|| solve_all_levels(&p, &SolverSettings::default(), RngStream::new(9, 0)))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_convergence_reports_trace() {
        let p = problem(two_point(), 1, 2000);
        let settings = SolverSettings {
            tol: 0.0,
            max_iter: 3,
            damping: 1.0,
        };
        match solve_all_levels(&p, &settings, RngStream::new(2, 0)) {
            Err(Error::NonConvergence { trace, .. }) => assert_eq!(trace.len(), 3),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn contraction_factor_of_geometric_trace() {
        let trace: Vec<f64> = (0..20).map(|j| 0.3f64.powi(j)).collect();
        let q = observed_contraction_factor(&trace, 1e-12).unwrap();
        assert!((q - 0.3).abs() < 1e-9);
        assert!(observed_contraction_factor(&[1.0, 0.0], 1e-12).is_none());
    }
}
