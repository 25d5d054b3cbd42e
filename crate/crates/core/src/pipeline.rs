//! Experiment runner behind the `lsi-lab` binary.
//!
//! Every CSV artifact starts with `# config_hash=<hex> seed=<n>` and every
//! JSON-lines record carries the same two fields. Timestamps go only to the
//! sidecar `run.log`, so artifacts are byte-identical across reruns.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::{ExperimentConfig, OutputFormat, Problem, TestKind};
use crate::cox::{CoxInputs, Ensemble, GammaFamily};
use crate::error::{Error, Result};
use crate::fp_counting::{solve_all_levels, FpSolution};
use crate::fp_general::{solve_system, word_statistics};
use crate::grid::GridFunction;
use crate::lattice::StateLattice;
use crate::li_model::{empirical_pmf, li_forward_marginals, marginal_distance, MarginalCurve};
use crate::parallel::pool;
use crate::rng::{tags, RngStream};
use crate::verify::{
    consistency_check, exp_clock_test, martingale_test, nonuniqueness_demo, power_check, projection_check,
    verification_ensemble, DemoSettings, TestReport,
};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "LSI_LAB_OUT";

/// Mass the LI forward equation may lose to lattice truncation.
pub const LEAK_TOLERANCE: f64 = 1e-4;

/// Relative perturbation of state 0 used by the wrong-gamma power check.
pub const GAMMA_PERTURBATION: f64 = 1.1;

/// Scale factor used by the wrong-lambda power check.
pub const LAMBDA_PERTURBATION: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Simulate,
    Check,
    DemoNonuniqueness,
    All,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub reports: Vec<TestReport>,
    pub out_dir: PathBuf,
}

impl Outcome {
    pub fn all_passed(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }
}

/// Output directory: `--out`, then the environment override, then the config.
pub fn resolve_out_dir(config: &ExperimentConfig, options: &RunOptions) -> PathBuf {
    options
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| config.output.directory.clone())
}

pub fn run(command: Command, config_path: &Path, options: &RunOptions) -> Result<Outcome> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = options.seed {
        config.seed = seed;
    }
    if let Some(threads) = options.threads {
        config.runtime.threads = Some(threads);
        config.validate()?;
    }
    let out_dir = resolve_out_dir(&config, options);
    Runner::new(config, out_dir)?.run(command)
}

/// Stateful runner holding the config, its hash and the output directory.
pub struct Runner {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    report: &'a TestReport,
}

impl Runner {
    pub fn new(config: ExperimentConfig, out_dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out_dir)?;
        Ok(Self {
            hash: config.hash()?,
            config,
            out_dir,
        })
    }

    pub fn run(&self, command: Command) -> Result<Outcome> {
        let workers = pool(self.config.runtime.threads);
        self.log(&format!("start {command:?} config_hash={} seed={}", self.hash, self.config.seed))?;
        let result = workers.install(|| self.dispatch(command));
        match &result {
            Ok(o) => self.log(&format!("finish {command:?}: {} reports, all passed: {}", o.reports.len(), o.all_passed()))?,
            Err(e) => self.log(&format!("error {command:?}: {e}"))?,
        }
        result
    }

    fn dispatch(&self, command: Command) -> Result<Outcome> {
        let mut outcome = Outcome {
            reports: Vec::new(),
            out_dir: self.out_dir.clone(),
        };
        match command {
            Command::Solve => {
                self.solve()?;
            }
            Command::Simulate => {
                let problem = self.config.problem()?;
                let gamma = self.read_gamma(&problem)?;
                self.simulate(&problem, &gamma)?;
            }
            Command::Check => {
                let problem = self.config.problem()?;
                let gamma = self.read_gamma(&problem)?;
                let std_errors = self.read_std_errors(&gamma)?;
                let ensemble = self.ensemble(&problem, &gamma)?;
                outcome.reports = self.check(&problem, &gamma, &std_errors, &ensemble)?;
            }
            Command::DemoNonuniqueness => {
                outcome.reports = vec![self.demo()?];
            }
            Command::All => {
                let (problem, solution) = self.solve()?;
                let ensemble = self.simulate(&problem, &solution.gamma)?;
                outcome.reports = self.check(&problem, &solution.gamma, &solution.std_errors, &ensemble)?;
            }
        }
        Ok(outcome)
    }

    fn csv_enabled(&self) -> bool {
        self.config.output.formats.contains(&OutputFormat::Csv)
    }

    fn jsonl_enabled(&self) -> bool {
        self.config.output.formats.contains(&OutputFormat::Jsonl)
    }

    fn header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash, self.config.seed)
    }

    fn write_artifact(&self, name: &str, body: &str) -> Result<()> {
        let mut file = BufWriter::new(File::create(self.out_dir.join(name))?);
        file.write_all(self.header().as_bytes())?;
        file.write_all(body.as_bytes())?;
        file.flush()?;
        Ok(())
    }

    fn log(&self, message: &str) -> Result<()> {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let mut log = OpenOptions::new().create(true).append(true).open(self.out_dir.join("run.log"))?;
        writeln!(log, "[{secs:.3}] {message}")?;
        Ok(())
    }

    /// Solves the configured fixed point; on non-convergence the residual
    /// trace (and the best iterate, if any) is persisted before returning the error.
    pub fn solve(&self) -> Result<(Problem, FpSolution)> {
        let problem = self.config.problem()?;
        let settings = self.config.solver.settings();
        let stream = RngStream::phase(self.config.seed, tags::SOLVE);
        let result = match &problem {
            Problem::Counting(p) => solve_all_levels(p, &settings, stream),
            Problem::General(p) => {
                if self.csv_enabled() {
                    let mut body = String::from("state,length,words,weight\n");
                    for s in word_statistics(&p.lattice, &p.nu) {
                        let _ = writeln!(body, "{},{},{},{}", p.lattice.state(s.state), s.length, s.words, s.weight);
                    }
                    self.write_artifact("word_diagnostics.csv", &body)?;
                }
                solve_system(p, &settings, stream)
            }
        };
        match result {
            Ok(solution) => {
                self.write_gamma(&solution.gamma, "gamma.csv")?;
                self.write_std_errors(&solution)?;
                self.write_traces(&solution.traces, &solution.weighted_traces)?;
                Ok((problem, solution))
            }
            Err(Error::NonConvergence {
                scope,
                iterations,
                last_residual,
                trace,
                best,
            }) => {
                self.write_traces(std::slice::from_ref(&trace), &[])?;
                if let Some(best) = &best {
                    self.write_gamma(best, "gamma_unconverged.csv")?;
                }
                Err(Error::NonConvergence {
                    scope,
                    iterations,
                    last_residual,
                    trace,
                    best,
                })
            }
            Err(e) => Err(e),
        }
    }

    fn write_gamma(&self, gamma: &GammaFamily, name: &str) -> Result<()> {
        let grid = gamma.grid();
        let mut body = String::from("state,t,gamma\n");
        for (x, g) in gamma.states.iter().zip(&gamma.gamma) {
            for (i, v) in g.values().iter().enumerate() {
                let _ = writeln!(body, "{x},{},{v}", grid.node(i));
            }
        }
        self.write_artifact(name, &body)
    }

    fn write_std_errors(&self, solution: &FpSolution) -> Result<()> {
        let grid = solution.gamma.grid();
        let mut body = String::from("state,t,std_error\n");
        for (x, se) in solution.gamma.states.iter().zip(&solution.std_errors) {
            for (i, v) in se.iter().enumerate() {
                let _ = writeln!(body, "{x},{},{v}", grid.node(i));
            }
        }
        self.write_artifact("gamma_std_error.csv", &body)
    }

    fn write_traces(&self, traces: &[Vec<f64>], weighted: &[Vec<f64>]) -> Result<()> {
        let mut body = String::from("level,iteration,residual,weighted_residual\n");
        for (level, trace) in traces.iter().enumerate() {
            for (it, r) in trace.iter().enumerate() {
                let w = weighted.get(level).and_then(|w| w.get(it)).copied().unwrap_or(f64::NAN);
                let _ = writeln!(body, "{level},{},{r},{w}", it + 1);
            }
        }
        self.write_artifact("residuals.csv", &body)
    }

    /// Reads `name` and checks its provenance header against this run.
    fn read_provenance_checked(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let path = self.out_dir.join(name);
        let file = File::open(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let mut lines = BufReader::new(file).lines();
        let first = lines.next().transpose()?.unwrap_or_default();
        let expected = self.header();
        if first.trim_end() != expected.trim_end() {
            return Err(Error::Provenance {
                artifact: path.display().to_string(),
                expected: expected.trim_start_matches("# ").trim_end().to_string(),
                found: first.trim_start_matches("# ").to_string(),
            });
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Inconsistent(format!("{name} line {}: {e}", n + 2)))?;
            rows.push(row);
        }
        Ok(rows)
    }

    fn read_family(&self, problem: &Problem, name: &str) -> Result<Vec<Vec<f64>>> {
        let lattice = problem.lattice();
        let grid = *problem.lambda().grid();
        let rows = self.read_provenance_checked(name)?;
        let mut values = vec![vec![f64::NAN; grid.n_steps()]; lattice.len()];
        for row in rows {
            let (x, t, v) = match row[..] {
                [x, t, v] => (x, t, v),
                _ => return Err(Error::Inconsistent(format!("{name}: expected 3 columns"))),
            };
            let ord = lattice
                .ordinal(x)
                .ok_or_else(|| Error::Inconsistent(format!("{name}: state {x} not in lattice")))?;
            let i = grid
                .node_index(t)
                .filter(|&i| i < grid.n_steps())
                .ok_or_else(|| Error::Inconsistent(format!("{name}: t={t} is not a cell start")))?;
            values[ord][i] = v;
        }
        if values.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Inconsistent(format!("{name}: missing cells")));
        }
        Ok(values)
    }

    pub fn read_gamma(&self, problem: &Problem) -> Result<GammaFamily> {
        let lattice = problem.lattice();
        let grid = *problem.lambda().grid();
        let values = self.read_family(problem, "gamma.csv")?;
        let gamma = GammaFamily {
            states: lattice.states().to_vec(),
            gamma: values.into_iter().map(|v| GridFunction::new(grid, v)).collect::<Result<_>>()?,
        };
        gamma.check_bounds(&self.config.model.bounds)?;
        Ok(gamma)
    }

    fn read_std_errors(&self, gamma: &GammaFamily) -> Result<Vec<Vec<f64>>> {
        if !self.out_dir.join("gamma_std_error.csv").is_file() {
            return Ok(vec![vec![0.0; gamma.grid().n_steps()]; gamma.len()]);
        }
        self.read_family(&self.config.problem()?, "gamma_std_error.csv")
    }

    fn inputs<'a>(&'a self, problem: &'a Problem, gamma: &'a GammaFamily, lattice: &'a StateLattice) -> CoxInputs<'a> {
        CoxInputs {
            gamma,
            lambda: problem.lambda(),
            nu: &self.config.model.nu,
            lattice,
        }
    }

    pub fn ensemble(&self, problem: &Problem, gamma: &GammaFamily) -> Result<Ensemble> {
        let lattice = problem.lattice();
        let m = &self.config.model;
        verification_ensemble(
            &m.eta,
            &m.bounds,
            &m.grid,
            &self.inputs(problem, gamma, &lattice),
            self.config.verify.n_paths,
            self.config.seed,
        )
    }

    pub fn simulate(&self, problem: &Problem, gamma: &GammaFamily) -> Result<Ensemble> {
        let ensemble = self.ensemble(problem, gamma)?;
        if self.csv_enabled() {
            let mut body = String::from("path_id,k,tau,jump,state_after\n");
            for (id, path) in ensemble.ids.iter().zip(&ensemble.paths) {
                let _ = writeln!(body, "{id},0,0,0,0");
                for k in 0..path.len() {
                    let _ = writeln!(body, "{id},{},{},{},{}", k + 1, path.times[k], path.sizes[k], path.states_after[k]);
                }
            }
            self.write_artifact("paths.csv", &body)?;
        }
        if ensemble.flagged > 0 {
            self.log(&format!("{} of {} paths left the lattice and were dropped", ensemble.flagged, ensemble.requested))?;
        }
        Ok(ensemble)
    }

    fn write_marginals(&self, curve: &MarginalCurve, ensemble: &Ensemble) -> Result<()> {
        let mut body = String::from("t,state,prob\n");
        for (i, p) in curve.pmf.iter().enumerate() {
            let t = curve.grid.node(i);
            for (x, q) in curve.states.iter().zip(p) {
                let _ = writeln!(body, "{t},{x},{q}");
            }
        }
        self.write_artifact("marginals.csv", &body)?;
        let mut body = String::from("t,state,li_prob,empirical_prob\n");
        for t in self.config.probe_times() {
            let d = marginal_distance(&ensemble.paths, curve, t)?;
            let li = curve.pmf_at(t)?;
            let counts = empirical_pmf(&ensemble.paths, curve.states.len(), t);
            for (x, (q, c)) in curve.states.iter().zip(li.iter().zip(&counts)) {
                let _ = writeln!(body, "{t},{x},{q},{}", *c as f64 / d.n as f64);
            }
        }
        self.write_artifact("marginals_empirical.csv", &body)
    }

    pub fn check(
        &self,
        problem: &Problem,
        gamma: &GammaFamily,
        std_errors: &[Vec<f64>],
        ensemble: &Ensemble,
    ) -> Result<Vec<TestReport>> {
        let lattice = problem.lattice();
        let m = &self.config.model;
        let v = &self.config.verify;
        let inputs = self.inputs(problem, gamma, &lattice);
        let curve = li_forward_marginals(problem.lambda(), &m.nu, &lattice, &m.grid, LEAK_TOLERANCE)?;
        if self.csv_enabled() {
            self.write_marginals(&curve, ensemble)?;
        }
        let probes = self.config.probe_times();
        let checkpoints = self.config.checkpoints();
        let mut reports = Vec::new();
        for kind in &v.tests {
            match kind {
                TestKind::Projection => reports.push(projection_check(ensemble, &curve, &probes, v.tv_threshold)?),
                TestKind::ExpClocks => reports.push(exp_clock_test(ensemble, &inputs)?),
                TestKind::Martingale => reports.push(martingale_test(ensemble, &inputs, &checkpoints)?),
                TestKind::Consistency => {
                    let solution = FpSolution {
                        gamma: gamma.clone(),
                        residuals: Vec::new(),
                        iterations: Vec::new(),
                        traces: Vec::new(),
                        weighted_traces: Vec::new(),
                        std_errors: std_errors.to_vec(),
                        support_start: Vec::new(),
                        unsupported: Vec::new(),
                        clamp_distance: 0.0,
                        restarts: Vec::new(),
                    };
                    reports.push(consistency_check(ensemble, &solution, &probes, 200)?);
                }
                TestKind::Power => reports.extend(self.power_checks(problem, gamma, ensemble, &curve)?),
            }
        }
        if self.jsonl_enabled() {
            self.write_reports("reports.jsonl", &reports)?;
        }
        let mut table = String::new();
        for r in &reports {
            let _ = writeln!(table, "{}", r.summary_line());
        }
        self.write_artifact("summary.txt", &table)?;
        Ok(reports)
    }

    /// Corrupted-input runs that the harness must reject.
    pub fn power_checks(
        &self,
        problem: &Problem,
        gamma: &GammaFamily,
        ensemble: &Ensemble,
        curve: &MarginalCurve,
    ) -> Result<Vec<TestReport>> {
        let lattice = problem.lattice();
        let m = &self.config.model;
        let v = &self.config.verify;
        let probes = self.config.probe_times();
        let nu = &m.nu;
        let mut out = Vec::new();

        let perturbed = gamma.perturbed(0, GAMMA_PERTURBATION);
        let bad_inputs = CoxInputs {
            gamma: &perturbed,
            lambda: problem.lambda(),
            nu,
            lattice: &lattice,
        };
        let bad = verification_ensemble(&m.eta, &m.bounds, &m.grid, &bad_inputs, v.n_paths, self.config.seed)?;
        out.push(power_check("power:gamma_state0_+10%", projection_check(&bad, curve, &probes, v.tv_threshold)?));

        let wrong_lambda = problem.lambda().scaled(LAMBDA_PERTURBATION);
        let wrong_curve = li_forward_marginals(&wrong_lambda, nu, &lattice, &m.grid, LEAK_TOLERANCE)?;
        out.push(power_check("power:lambda_x1.1", projection_check(ensemble, &wrong_curve, &probes, v.tv_threshold)?));

        let upper = GammaFamily::constant(&lattice, m.grid, m.bounds.upper);
        let upper_inputs = CoxInputs { gamma: &upper, ..bad_inputs };
        out.push(power_check("power:clocks_gamma=U", exp_clock_test(ensemble, &upper_inputs)?));

        let mean = m.eta.mean_path(&m.bounds, &m.grid, v.n_paths, RngStream::phase(self.config.seed, tags::VERIFY));
        let mean_row = GridFunction::new(m.grid, mean)?;
        let unconditional = GammaFamily {
            states: lattice.states().to_vec(),
            gamma: vec![mean_row; lattice.len()],
        };
        let mean_inputs = CoxInputs { gamma: &unconditional, ..bad_inputs };
        out.push(power_check(
            "power:martingale_gamma=E[eta]",
            martingale_test(ensemble, &mean_inputs, &self.config.checkpoints())?,
        ));
        Ok(out)
    }

    fn write_reports(&self, name: &str, reports: &[TestReport]) -> Result<()> {
        let mut body = String::new();
        for r in reports {
            let record = ReportRecord {
                config_hash: &self.hash,
                seed: self.config.seed,
                report: r,
            };
            body.push_str(&serde_json::to_string(&record)?);
            body.push('\n');
        }
        fs::write(self.out_dir.join(name), body)?;
        Ok(())
    }

    pub fn demo(&self) -> Result<TestReport> {
        let settings = DemoSettings {
            n_paths: self.config.verify.n_paths,
            mc_paths: self.config.solver.mc_paths,
            solver: self.config.solver.settings(),
            ..DemoSettings::default()
        };
        let demo = nonuniqueness_demo(&settings, self.config.seed)?;
        if self.csv_enabled() {
            let mut body = String::from("x,cox_first_jump,reused_clock_first_arrival,exp1\n");
            for i in 0..demo.points.len() {
                let _ = writeln!(
                    body,
                    "{},{},{},{}",
                    demo.points[i], demo.cox_first_jump_ecdf[i], demo.reused_clock_ecdf[i], demo.exp_cdf[i]
                );
            }
            self.write_artifact("demo_ecdf.csv", &body)?;
        }
        if self.jsonl_enabled() {
            self.write_reports("demo_report.jsonl", std::slice::from_ref(&demo.report))?;
        }
        self.write_artifact("demo_summary.txt", &format!("{}\n", demo.report.summary_line()))?;
        Ok(demo.report)
    }
}
