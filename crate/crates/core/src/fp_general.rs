//! Simultaneous fixed point for general discrete jump laws.
//!
//! On `{X_{t-} = x}` the process has made `k` jumps forming a word `a` with
//! `S_k(a) = x`. For a word, the frozen times `tau^a_i` run the Cox clock
//! condition as if the first `k` jump sizes were `a`, so
//!
//! ```text
//! f_x(t) = sum_{k, a : S_k(a) = x} prod p_{a_i} E[eta_t 1{tau^a_k < t} exp(-int_{tau^a_k}^t eta lambda(., x) / gamma_x)]
//! ```
//!
//! and `g_x` drops `eta_t`. All states are coupled, so the system is solved
//! by damped simultaneous iteration. Words sharing a prefix share their
//! frozen times, so each sample is evaluated by a depth-first walk of the
//! word tree pruned once a frozen time passes the horizon.

use serde::{Deserialize, Serialize};

use crate::cox::{invert_clock, GammaFamily, IntensitySpec};
use crate::error::{Error, Result};
use crate::eta::{EtaModel, EtaPath};
use crate::fp_counting::{
    for_each_survival, picard_update, FgEstimate, FpSolution, RestartSummary, SampleSet, SolverSettings, DEFAULT_TAIL,
};
use crate::grid::{integrate_cells, Bounds, GridFunction, TimeGrid};
use crate::jumps::JumpDistribution;
use crate::lattice::{auto_depth, StateLattice};
use crate::parallel::chunked_sum;
use crate::rng::RngStream;

/// Default cap on the number of words per state.
pub const DEFAULT_WORD_CAP: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralFpProblem {
    pub eta_model: EtaModel,
    pub nu: JumpDistribution,
    pub lambda: IntensitySpec,
    pub lattice: StateLattice,
    pub bounds: Bounds,
    pub grid: TimeGrid,
    pub mc_paths: usize,
    pub word_cap: f64,
}

impl GeneralFpProblem {
    /// `max_jumps = None` picks `K` by the Poisson tail rule; `lambda_of`
    /// maps a state value to `lambda(., x)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        eta_model: EtaModel,
        nu: JumpDistribution,
        bounds: Bounds,
        grid: TimeGrid,
        mc_paths: usize,
        max_jumps: Option<usize>,
        word_cap: f64,
        lambda_of: impl Fn(f64) -> GridFunction,
    ) -> Result<Self> {
        let k = max_jumps.unwrap_or_else(|| auto_depth(&bounds, grid.horizon(), DEFAULT_TAIL));
        let lattice = StateLattice::build(&nu, k)?;
        let lambda = IntensitySpec::new(lattice.states().iter().map(|&x| lambda_of(x)).collect(), bounds)?;
        let problem = Self {
            eta_model,
            nu,
            lambda,
            lattice,
            bounds,
            grid,
            mc_paths,
            word_cap,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn max_jumps(&self) -> usize {
        self.lattice.max_jumps()
    }

    pub fn validate(&self) -> Result<()> {
        self.eta_model.validate(&self.bounds)?;
        if self.mc_paths < 1000 {
            return Err(Error::config("solver.mc_paths", "need at least 1000 Monte Carlo paths"));
        }
        if self.lambda.n_states() != self.lattice.len() || self.lambda.grid() != &self.grid {
            return Err(Error::Inconsistent("lambda does not cover the lattice on the problem grid".into()));
        }
        let stats = word_statistics(&self.lattice, &self.nu);
        let mut per_state = vec![0.0; self.lattice.len()];
        for s in &stats {
            per_state[s.state] += s.words;
        }
        if let Some((state, &words)) = per_state
            .iter()
            .enumerate()
            .find(|(_, w)| **w > self.word_cap)
        {
            return Err(Error::WordBudget {
                state,
                words,
                cap: self.word_cap,
            });
        }
        Ok(())
    }

    pub fn draw_samples(&self, stream: RngStream) -> SampleSet {
        SampleSet::draw(
            &self.eta_model,
            &self.bounds,
            &self.grid,
            self.mc_paths,
            self.max_jumps() + 1,
            stream,
        )
    }
}

/// Number and total probability weight of words of one length ending at a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordStat {
    pub state: usize,
    pub length: usize,
    pub words: f64,
    pub weight: f64,
}

/// Word counts by dynamic programming over the lattice successor table.
pub fn word_statistics(lattice: &StateLattice, nu: &JumpDistribution) -> Vec<WordStat> {
    let n = lattice.len();
    let mut count = vec![0.0; n];
    let mut weight = vec![0.0; n];
    count[0] = 1.0;
    weight[0] = 1.0;
    let mut out = vec![WordStat {
        state: 0,
        length: 0,
        words: 1.0,
        weight: 1.0,
    }];
    for length in 1..=lattice.max_jumps() {
        let mut next_count = vec![0.0; n];
        let mut next_weight = vec![0.0; n];
        for x in 0..n {
            if count[x] == 0.0 {
                continue;
            }
            for (j, &p) in nu.probs().iter().enumerate() {
                if let Some(y) = lattice.successor(x, j) {
                    next_count[y] += count[x];
                    next_weight[y] += weight[x] * p;
                }
            }
        }
        for y in lattice.ascending() {
            if next_count[y] > 0.0 {
                out.push(WordStat {
                    state: y,
                    length,
                    words: next_count[y],
                    weight: next_weight[y],
                });
            }
        }
        count = next_count;
        weight = next_weight;
    }
    out
}

/// Explicit list of the words (atom indices) of length `<= max_len` ending at `target`.
pub fn enumerate_words(lattice: &StateLattice, nu: &JumpDistribution, target: usize, max_len: usize) -> Vec<Vec<usize>> {
    fn walk(
        lattice: &StateLattice,
        nu: &JumpDistribution,
        target: usize,
        max_len: usize,
        state: usize,
        word: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if state == target {
            out.push(word.clone());
        }
        if word.len() == max_len {
            return;
        }
        for j in 0..nu.len() {
            if let Some(next) = lattice.successor(state, j) {
                word.push(j);
                walk(lattice, nu, target, max_len, next, word, out);
                word.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(lattice, nu, target, max_len, 0, &mut Vec::new(), &mut out);
    out
}

/// Frozen times `tau^a_0 = 0 < tau^a_1 < ...` of one word for one sample;
/// the list stops early once a time passes the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWordTimes {
    pub word: Vec<usize>,
    pub states: Vec<usize>,
    pub times: Vec<f64>,
}

impl FrozenWordTimes {
    pub fn compute(
        word: &[usize],
        lattice: &StateLattice,
        gamma: &GammaFamily,
        lambda: &IntensitySpec,
        eta: &EtaPath,
        clocks: &[f64],
    ) -> Self {
        let grid = eta.grid;
        let mut states = vec![0usize];
        let mut times = vec![0.0];
        for (i, &j) in word.iter().enumerate() {
            let x = *states.last().unwrap();
            let tau = invert_clock(&grid, *times.last().unwrap(), clocks[i], |c| {
                eta.values[c] * lambda.lambda[x].cell(c) / gamma.gamma[x].cell(c)
            });
            match tau.filter(|&t| t < grid.horizon()) {
                Some(t) => {
                    times.push(t);
                    states.push(lattice.successor(x, j).expect("word stays in lattice"));
                }
                None => break,
            }
        }
        Self {
            word: word.to_vec(),
            states,
            times,
        }
    }

    /// Whether the whole word was realized before the horizon.
    pub fn complete(&self) -> bool {
        self.times.len() == self.word.len() + 1
    }
}

struct Walk<'a> {
    grid: TimeGrid,
    lattice: &'a StateLattice,
    probs: &'a [f64],
    gamma: &'a [GridFunction],
    lambda: &'a [GridFunction],
    max_depth: usize,
}

impl Walk<'_> {
    /// Visits every realized word node of one sample, calling
    /// `sink(state, cell, weight * survival)`.
    fn run(&self, eta: &[f64], clocks: &[f64], sink: &mut impl FnMut(usize, usize, f64)) {
        self.node(eta, clocks, 0, 0.0, 1.0, 0, sink);
    }

    #[allow(clippy::too_many_arguments)]
    fn node(
        &self,
        eta: &[f64],
        clocks: &[f64],
        state: usize,
        tau: f64,
        weight: f64,
        depth: usize,
        sink: &mut impl FnMut(usize, usize, f64),
    ) {
        let lam = self.lambda[state].values();
        let gam = self.gamma[state].values();
        let rate = |c: usize| eta[c] * lam[c] / gam[c];
        for_each_survival(&self.grid, tau, rate, |i, c| sink(state, i, weight * c));
        if depth == self.max_depth {
            return;
        }
        let Some(next_tau) = invert_clock(&self.grid, tau, clocks[depth], rate).filter(|&t| t < self.grid.horizon())
        else {
            return;
        };
        for (j, &p) in self.probs.iter().enumerate() {
            if let Some(next) = self.lattice.successor(state, j) {
                self.node(eta, clocks, next, next_tau, weight * p, depth + 1, sink);
            }
        }
    }
}

fn walker<'a>(problem: &'a GeneralFpProblem, gamma: &'a GammaFamily) -> Walk<'a> {
    Walk {
        grid: problem.grid,
        lattice: &problem.lattice,
        probs: problem.nu.probs(),
        gamma: &gamma.gamma,
        lambda: &problem.lambda.lambda,
        max_depth: problem.max_jumps(),
    }
}

/// `f_x`, `g_x` at cell midpoints for every lattice state at once.
pub fn estimate_fg_general(problem: &GeneralFpProblem, gamma: &GammaFamily, samples: &SampleSet) -> Vec<FgEstimate> {
    let n = problem.grid.n_steps();
    let n_states = problem.lattice.len();
    let walk = walker(problem, gamma);
    let sums = chunked_sum(samples.len(), 2 * n * n_states, |range, acc| {
        for p in range {
            let s = &samples.samples[p];
            let eta = &s.eta.values;
            walk.run(eta, &s.clocks, &mut |x, i, wc| {
                let base = 2 * n * x;
                acc[base + i] += eta[i] * wc;
                acc[base + n + i] += wc;
            });
        }
    });
    let scale = 1.0 / samples.len().max(1) as f64;
    (0..n_states)
        .map(|x| {
            let base = 2 * n * x;
            FgEstimate {
                f: sums[base..base + n].iter().map(|v| v * scale).collect(),
                g: sums[base + n..base + 2 * n].iter().map(|v| v * scale).collect(),
            }
        })
        .collect()
}

/// Delta-method standard error of `f_x / g_x` per state and cell.
pub fn ratio_std_error_general(problem: &GeneralFpProblem, gamma: &GammaFamily, samples: &SampleSet) -> Vec<Vec<f64>> {
    let n = problem.grid.n_steps();
    let n_states = problem.lattice.len();
    let est = estimate_fg_general(problem, gamma, samples);
    let ratio: Vec<Vec<f64>> = est
        .iter()
        .map(|e| e.f.iter().zip(&e.g).map(|(f, g)| if *g > 0.0 { f / g } else { 0.0 }).collect())
        .collect();
    let walk = walker(problem, gamma);
    let sq = chunked_sum(samples.len(), n * n_states, |range, acc| {
        for p in range {
            let s = &samples.samples[p];
            let eta = &s.eta.values;
            // contributions of one sample are summed per (state, cell) before squaring
            let mut local: Vec<(usize, f64)> = Vec::new();
            walk.run(eta, &s.clocks, &mut |x, i, wc| local.push((x * n + i, wc * (eta[i] - ratio[x][i]))));
            local.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < local.len() {
                let idx = local[k].0;
                let mut d = 0.0;
                while k < local.len() && local[k].0 == idx {
                    d += local[k].1;
                    k += 1;
                }
                acc[idx] += d * d;
            }
        }
    });
    let n_samples = samples.len().max(1) as f64;
    (0..n_states)
        .map(|x| {
            (0..n)
                .map(|i| {
                    let g = est[x].g[i];
                    if g > 0.0 {
                        sq[x * n + i].sqrt() / (g * n_samples)
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        })
        .collect()
}

/// Monte Carlo value of a single word's term at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordEstimate {
    pub f: f64,
    pub f_se: f64,
    pub g: f64,
    pub g_se: f64,
}

/// `prod p * E[eta_t 1{tau^a_k < t} exp(-int_{tau^a_k}^t ...)]` (and the `g`
/// analogue) for one word, with standard errors.
pub fn word_contribution(
    problem: &GeneralFpProblem,
    gamma: &GammaFamily,
    samples: &SampleSet,
    word: &[usize],
    t: f64,
) -> Result<WordEstimate> {
    problem.grid.check_time(t)?;
    let weight: f64 = word.iter().map(|&j| problem.nu.probs()[j]).product();
    let cell = problem.grid.cell_of(t);
    let sums = chunked_sum(samples.len(), 4, |range, acc| {
        for p in range {
            let s = &samples.samples[p];
            let frozen = FrozenWordTimes::compute(word, &problem.lattice, gamma, &problem.lambda, &s.eta, &s.clocks);
            if !frozen.complete() {
                continue;
            }
            let tau = *frozen.times.last().unwrap();
            if tau >= t {
                continue;
            }
            let x = *frozen.states.last().unwrap();
            let integral = integrate_cells(&problem.grid, tau, t, |c| {
                s.eta.values[c] * problem.lambda.lambda[x].cell(c) / gamma.gamma[x].cell(c)
            });
            let g = weight * (-integral).exp();
            let f = s.eta.values[cell] * g;
            acc[0] += f;
            acc[1] += f * f;
            acc[2] += g;
            acc[3] += g * g;
        }
    });
    let n = samples.len() as f64;
    let se = |s: f64, s2: f64| ((s2 / n - (s / n).powi(2)).max(0.0) / (n - 1.0)).sqrt();
    Ok(WordEstimate {
        f: sums[0] / n,
        f_se: se(sums[0], sums[1]),
        g: sums[2] / n,
        g_se: se(sums[2], sums[3]),
    })
}

/// Nearest state (by value) with support; ties go to the state closer to 0.
fn nearest_supported(lattice: &StateLattice, supported: &[bool], x: usize) -> Option<usize> {
    let v = lattice.state(x);
    (0..lattice.len()).filter(|&y| supported[y]).min_by(|&a, &b| {
        let da = (lattice.state(a) - v).abs();
        let db = (lattice.state(b) - v).abs();
        da.total_cmp(&db)
            .then(lattice.state(a).abs().total_cmp(&lattice.state(b).abs()))
    })
}

struct Run {
    gamma: GammaFamily,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
    weighted_trace: Vec<f64>,
    supported: Vec<bool>,
    support_start: Vec<Option<usize>>,
    clamp_distance: f64,
}

fn damped_run(problem: &GeneralFpProblem, samples: &SampleSet, settings: &SolverSettings, initial: f64) -> Run {
    let grid = problem.grid;
    let rate = problem.bounds.contraction_weight_rate(grid.horizon());
    let n_states = problem.lattice.len();
    let mut gamma = GammaFamily {
        states: problem.lattice.states().to_vec(),
        gamma: vec![GridFunction::constant(grid, initial); n_states],
    };
    let theta = settings.damping;
    let mut run = Run {
        gamma: gamma.clone(),
        iterations: settings.max_iter,
        converged: false,
        trace: Vec::new(),
        weighted_trace: Vec::new(),
        supported: vec![false; n_states],
        support_start: vec![None; n_states],
        clamp_distance: 0.0,
    };
    for j in 0..settings.max_iter {
        let est = estimate_fg_general(problem, &gamma, samples);
        let mut next = gamma.clone();
        let mut residual = 0.0f64;
        let mut weighted = 0.0f64;
        for x in 0..n_states {
            let Ok((update, clamp)) = picard_update(&est[x], &problem.bounds, &grid, x) else {
                run.supported[x] = false;
                run.support_start[x] = None;
                continue;
            };
            run.supported[x] = true;
            run.support_start[x] = est[x].support_start();
            run.clamp_distance = run.clamp_distance.max(clamp);
            let values = next.gamma[x].values_mut();
            if theta == 1.0 {
                values.copy_from_slice(&update);
            } else {
                for (v, u) in values.iter_mut().zip(&update) {
                    *v = (1.0 - theta) * *v + theta * u;
                }
            }
            residual = residual.max(next.gamma[x].weighted_sup_distance(&gamma.gamma[x], 0.0));
            weighted = weighted.max(next.gamma[x].weighted_sup_distance(&gamma.gamma[x], rate));
        }
        run.trace.push(residual);
        run.weighted_trace.push(weighted);
        gamma = next;
        if residual <= settings.tol {
            run.iterations = j;
            run.converged = true;
            break;
        }
    }
    for x in 0..n_states {
        if !run.supported[x] {
            if let Some(y) = nearest_supported(&problem.lattice, &run.supported, x) {
                gamma.gamma[x] = gamma.gamma[y].clone();
            }
        }
    }
    run.gamma = gamma;
    run
}

pub fn solve_system(problem: &GeneralFpProblem, settings: &SolverSettings, stream: RngStream) -> Result<FpSolution> {
    problem.validate()?;
    let samples = problem.draw_samples(stream);
    solve_system_with(problem, &samples, settings, true)
}

/// Runs the damped iteration from `(L+U)/2`, and when `restarts` is set also
/// from `L` and `U`, reporting each restart's distance to the main run.
pub fn solve_system_with(
    problem: &GeneralFpProblem,
    samples: &SampleSet,
    settings: &SolverSettings,
    restarts: bool,
) -> Result<FpSolution> {
    if !(settings.damping > 0.0 && settings.damping <= 1.0) {
        return Err(Error::config("solver.damping", "must lie in (0, 1]"));
    }
    let main = damped_run(problem, samples, settings, problem.bounds.midpoint());
    if !main.supported.iter().any(|&s| s) {
        return Err(Error::InsufficientMass {
            state: 0,
            first_t: problem.grid.horizon(),
        });
    }
    if !main.converged {
        return Err(Error::NonConvergence {
            scope: "general system".into(),
            iterations: settings.max_iter,
            last_residual: main.trace.last().copied().unwrap_or(f64::NAN),
            trace: main.trace,
            best: Some(Box::new(main.gamma)),
        });
    }
    let mut summaries = vec![RestartSummary {
        initial: problem.bounds.midpoint(),
        iterations: main.iterations,
        converged: true,
        distance: 0.0,
    }];
    if restarts {
        for initial in [problem.bounds.lower, problem.bounds.upper] {
            let other = damped_run(problem, samples, settings, initial);
            summaries.push(RestartSummary {
                initial,
                iterations: other.iterations,
                converged: other.converged,
                distance: other.gamma.max_distance(&main.gamma),
            });
        }
    }
    let n_states = problem.lattice.len();
    let std_errors = ratio_std_error_general(problem, &main.gamma, samples);
    let final_residual = main.trace.last().copied().unwrap_or(0.0);
    Ok(FpSolution {
        residuals: (0..n_states)
            .map(|x| if main.supported[x] { final_residual } else { 0.0 })
            .collect(),
        iterations: vec![main.iterations; n_states],
        traces: vec![main.trace],
        weighted_traces: vec![main.weighted_trace],
        std_errors,
        support_start: main.support_start,
        unsupported: (0..n_states).filter(|&x| !main.supported[x]).collect(),
        clamp_distance: main.clamp_distance,
        restarts: summaries,
        gamma: main.gamma,
    })
}

/// `theta` and `xi` of one word at one time for one `eta` path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaXi {
    pub theta: f64,
    pub xi: f64,
    pub eta: f64,
}

impl ThetaXi {
    /// The `f` term `eta_t theta_t xi_t`.
    pub fn f(&self) -> f64 {
        self.eta * self.theta * self.xi
    }

    /// The `g` term `theta_t xi_t`.
    pub fn g(&self) -> f64 {
        self.theta * self.xi
    }
}

/// Iterated-integral evaluation of a word's term along a fixed `eta` path.
///
/// With `r_i = eta lambda(., x_i) / gamma_{x_i}` along the word's states and
/// `R_i` its integral, `h_0 = 1`,
/// `h_i(s) = int_0^s h_{i-1} r_{i-1} e^{R_i - R_{i-1}} du`, and
/// `xi_t = e^{-R_k(T)} h_k(t)`, `theta_t = e^{R_k(T) - R_k(t)}`.
/// The ODE for `(R, h)` is integrated by RK4 with `substeps` steps per cell.
pub fn theta_xi(
    states: &[usize],
    gamma: &GammaFamily,
    lambda: &IntensitySpec,
    eta: &EtaPath,
    times: &[f64],
    substeps: usize,
) -> Vec<ThetaXi> {
    let grid = eta.grid;
    let k = states.len() - 1;
    let rates = |cell: usize| -> Vec<f64> {
        states
            .iter()
            .map(|&x| eta.values[cell] * lambda.lambda[x].cell(cell) / gamma.gamma[x].cell(cell))
            .collect()
    };
    // y = (R_0..R_k, h_1..h_k)
    let deriv = |y: &[f64], r: &[f64], out: &mut [f64]| {
        out[..=k].copy_from_slice(r);
        for i in 1..=k {
            let h_prev = if i == 1 { 1.0 } else { y[k + i - 1] };
            out[k + i] = h_prev * r[i - 1] * (y[i] - y[i - 1]).exp();
        }
    };
    let step = |y: &mut Vec<f64>, r: &[f64], dt: f64| {
        let m = y.len();
        let mut k1 = vec![0.0; m];
        let mut k2 = vec![0.0; m];
        let mut k3 = vec![0.0; m];
        let mut k4 = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        deriv(y, r, &mut k1);
        for j in 0..m {
            tmp[j] = y[j] + 0.5 * dt * k1[j];
        }
        deriv(&tmp, r, &mut k2);
        for j in 0..m {
            tmp[j] = y[j] + 0.5 * dt * k2[j];
        }
        deriv(&tmp, r, &mut k3);
        for j in 0..m {
            tmp[j] = y[j] + dt * k3[j];
        }
        deriv(&tmp, r, &mut k4);
        for j in 0..m {
            y[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    };
    let advance = |y: &mut Vec<f64>, cell: usize, from: f64, to: f64| {
        if to <= from {
            return;
        }
        let r = rates(cell);
        let n_sub = ((to - from) / grid.step() * substeps as f64).ceil().max(1.0) as usize;
        let dt = (to - from) / n_sub as f64;
        for _ in 0..n_sub {
            step(y, &r, dt);
        }
    };
    // R_k(T) along the final state's rate
    let last = states[k];
    let r_k_total: f64 = integrate_cells(&grid, 0.0, grid.horizon(), |c| {
        eta.values[c] * lambda.lambda[last].cell(c) / gamma.gamma[last].cell(c)
    });

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = vec![
        ThetaXi {
            theta: 0.0,
            xi: 0.0,
            eta: 0.0
        };
        times.len()
    ];
    let mut y = vec![0.0; 2 * k + 1];
    let mut t_now = 0.0;
    let mut cell = 0usize;
    for idx in order {
        let target = times[idx].min(grid.horizon());
        while cell < grid.n_steps() && grid.node(cell + 1) <= target {
            advance(&mut y, cell, t_now, grid.node(cell + 1));
            cell += 1;
            t_now = grid.node(cell);
        }
        if cell < grid.n_steps() && target > t_now {
            advance(&mut y, cell, t_now, target);
            t_now = target;
        }
        let h_k = if k == 0 { 1.0 } else { y[2 * k] };
        let r_k_t = y[k];
        out[idx] = ThetaXi {
            theta: (r_k_total - r_k_t).exp(),
            xi: (-r_k_total).exp() * h_k,
            eta: eta.values[grid.cell_of(target)],
        };
    }
    out
}

/// A word's `(f, g)` term at `t`, averaged over a finite `eta` law and
/// weighted by the word's probability.
pub fn theta_xi_oracle(
    word: &[usize],
    problem: &GeneralFpProblem,
    gamma: &GammaFamily,
    law: &[(EtaPath, f64)],
    t: f64,
    substeps: usize,
) -> (f64, f64) {
    let mut states = vec![0usize];
    for &j in word {
        let x = *states.last().unwrap();
        states.push(problem.lattice.successor(x, j).expect("word stays in lattice"));
    }
    let weight: f64 = word.iter().map(|&j| problem.nu.probs()[j]).product();
    let mut f = 0.0;
    let mut g = 0.0;
    for (eta, p) in law {
        let v = theta_xi(&states, gamma, &problem.lambda, eta, &[t], substeps)[0];
        f += p * weight * v.f();
        g += p * weight * v.g();
    }
    (f, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp_counting::{solve_all_levels_with, CountingFpProblem};

    fn walk_nu() -> JumpDistribution {
        JumpDistribution::new(vec![1.0, -1.0], vec![0.7, 0.3]).unwrap()
    }

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 20).unwrap()
    }

    fn bounds() -> Bounds {
        Bounds::new(1.0, 2.0).unwrap()
    }

    fn general(model: EtaModel, nu: JumpDistribution, k: usize, n: usize) -> GeneralFpProblem {
        let grid = grid();
        GeneralFpProblem::new(model, nu, bounds(), grid, n, Some(k), DEFAULT_WORD_CAP, |_| {
            GridFunction::constant(grid, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn sum_zero_words() {
        let nu = walk_nu();
        let lattice = StateLattice::build(&nu, 3).unwrap();
        let zero = lattice.ordinal(0.0).unwrap();
        let mut words = enumerate_words(&lattice, &nu, zero, 3);
        words.sort();
        assert_eq!(words, vec![vec![], vec![0, 1], vec![1, 0]]);
        let weights: Vec<f64> = words
            .iter()
            .map(|w| w.iter().map(|&j| nu.probs()[j]).product())
            .collect();
        assert!((weights[1] - 0.21).abs() < 1e-15 && (weights[2] - 0.21).abs() < 1e-15);
        let stats = word_statistics(&lattice, &nu);
        let total: f64 = stats.iter().filter(|s| s.state == zero).map(|s| s.words).sum();
        assert_eq!(total, 3.0);
    }

    #[test]
    fn word_cap_is_enforced() {
        let grid = grid();
        let err = GeneralFpProblem::new(EtaModel::Constant { value: 1.5 }, walk_nu(), bounds(), grid, 1000, Some(6), 5.0, |_| {
            GridFunction::constant(grid, 1.0)
        })
        .unwrap_err();
        assert!(matches!(err, Error::WordBudget { .. }));
    }

    #[test]
    fn constant_eta_factors_out_per_state() {
        let p = general(EtaModel::Constant { value: 1.4 }, walk_nu(), 4, 1000);
        let samples = p.draw_samples(RngStream::new(1, 0));
        let gamma = GammaFamily::constant(&p.lattice, p.grid, 1.2);
        for est in estimate_fg_general(&p, &gamma, &samples) {
            for (f, g) in est.f.iter().zip(&est.g) {
                assert!((f - 1.4 * g).abs() < 1e-12);
            }
        }
        let sol = solve_system(&p, &SolverSettings { damping: 1.0, ..Default::default() }, RngStream::new(1, 0)).unwrap();
        assert_eq!(sol.iterations[0], 1);
        assert!(sol.gamma.gamma.iter().all(|g| g.values().iter().all(|v| (v - 1.4).abs() < 1e-12)));
    }

    #[test]
    fn unit_jumps_reproduce_counting_solver() {
        let model = EtaModel::RandomConstant {
            values: vec![1.0, 2.0],
            probs: vec![0.5, 0.5],
        };
        let grid = grid();
        let counting = CountingFpProblem::new(model.clone(), bounds(), grid, 2000, Some(5), |_| {
            GridFunction::constant(grid, 1.0)
        })
        .unwrap();
        let gen = general(model, JumpDistribution::unit(), 5, 2000);
        let stream = RngStream::new(21, 0);
        let samples = counting.draw_samples(stream);
        assert_eq!(samples, gen.draw_samples(stream));
        let settings = SolverSettings {
            tol: 1e-12,
            max_iter: 500,
            damping: 0.5,
        };
        let a = solve_all_levels_with(&counting, &samples, &settings).unwrap();
        let b = solve_system_with(&gen, &samples, &settings, false).unwrap();
        assert!(a.gamma.max_distance(&b.gamma) < 1e-9);
    }

    #[test]
    fn relabeling_atoms_leaves_gamma_unchanged() {
        let model = EtaModel::RandomConstant {
            values: vec![1.0, 2.0],
            probs: vec![0.4, 0.6],
        };
        let a = general(model.clone(), walk_nu(), 4, 1500);
        let b = general(model, JumpDistribution::new(vec![-1.0, 1.0], vec![0.3, 0.7]).unwrap(), 4, 1500);
        let settings = SolverSettings {
            tol: 1e-10,
            max_iter: 300,
            damping: 0.5,
        };
        let sa = solve_system(&a, &settings, RngStream::new(3, 0)).unwrap();
        let sb = solve_system(&b, &settings, RngStream::new(3, 0)).unwrap();
        for (x, &v) in a.lattice.states().iter().enumerate() {
            let y = b.lattice.ordinal(v).unwrap();
            assert!(sa.gamma.gamma[x].weighted_sup_distance(&sb.gamma.gamma[y], 0.0) < 1e-9);
        }
    }

    #[test]
    fn empty_word_matches_direct_formula() {
        let model = EtaModel::DeterministicSinusoid {
            base: 1.5,
            amplitude: 0.3,
            period: 0.6,
        };
        let p = general(model.clone(), walk_nu(), 3, 1000);
        let eta = model.sample(&p.bounds, &p.grid, RngStream::new(0, 0));
        let mut gamma = GammaFamily::constant(&p.lattice, p.grid, 1.0);
        gamma.gamma[0] = GridFunction::from_fn(p.grid, |t| 1.2 + 0.5 * t);
        for t in [0.13, 0.5, 0.77, 1.0] {
            let v = theta_xi(&[0], &gamma, &p.lambda, &eta, &[t], 4)[0];
            let direct = eta.values[p.grid.cell_of(t)]
                * (-integrate_cells(&p.grid, 0.0, t, |c| eta.values[c] / gamma.gamma[0].cell(c))).exp();
            assert!((v.f() - direct).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn theta_and_xi_respect_their_bands() {
        let b = bounds();
        let p = general(EtaModel::Constant { value: 1.0 }, walk_nu(), 4, 1000);
        let eta = EtaModel::TwoStateMarkov {
            low: 1.0,
            high: 2.0,
            rate_up: 3.0,
            rate_down: 3.0,
            start_high: 0.5,
        }
        .sample(&b, &p.grid, RngStream::new(4, 4));
        let mut gamma = GammaFamily::constant(&p.lattice, p.grid, 1.0);
        for (x, g) in gamma.gamma.iter_mut().enumerate() {
            *g = GridFunction::from_fn(p.grid, |t| 1.0 + ((x as f64 + 3.0 * t).sin()).abs());
        }
        let lattice = &p.lattice;
        let words = [vec![], vec![0], vec![0, 1], vec![1, 1, 0], vec![0, 0, 0, 1]];
        let times = [0.05, 0.3, 0.61, 0.99];
        let (lo, hi, t_max) = (b.min_rate(), b.max_rate(), 1.0f64);
        for word in &words {
            let mut states = vec![0usize];
            for &j in word {
                states.push(lattice.successor(*states.last().unwrap(), j).unwrap());
            }
            let k = word.len() as i32;
            let fact: f64 = (1..=word.len()).map(|i| i as f64).product();
            let vals = theta_xi(&states, &gamma, &p.lambda, &eta, &times, 8);
            for (v, &t) in vals.iter().zip(&times) {
                let xi_lo = lo.powi(k) * (-hi * t_max).exp() * t.powi(k) / fact;
                let xi_hi = hi.powi(k) * (-lo * t_max).exp() * t_max.powi(k) / fact;
                assert!(v.xi >= xi_lo * (1.0 - 1e-9) && v.xi <= xi_hi * (1.0 + 1e-9), "xi {} word {word:?}", v.xi);
                assert!(v.theta >= 1.0 && v.theta <= (hi * (t_max - t)).exp() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn word_term_matches_oracle() {
        let model = EtaModel::DeterministicSinusoid {
            base: 1.5,
            amplitude: 0.4,
            period: 0.8,
        };
        let p = general(model.clone(), walk_nu(), 3, 40_000);
        let law = model.finite_law(&p.bounds, &p.grid).unwrap();
        let mut gamma = GammaFamily::constant(&p.lattice, p.grid, 1.0);
        for (x, g) in gamma.gamma.iter_mut().enumerate() {
            *g = GridFunction::from_fn(p.grid, |t| 1.3 + 0.1 * x as f64 + 0.2 * t);
        }
        let samples = p.draw_samples(RngStream::new(77, 0));
        let word = [0usize, 1];
        let mc = word_contribution(&p, &gamma, &samples, &word, 0.7).unwrap();
        let (f, g) = theta_xi_oracle(&word, &p, &gamma, &law, 0.7, 16);
        assert!((mc.f - f).abs() < 3.0 * mc.f_se, "f {} vs {f} (se {})", mc.f, mc.f_se);
        assert!((mc.g - g).abs() < 3.0 * mc.g_se, "g {} vs {g} (se {})", mc.g, mc.g_se);
    }
}
