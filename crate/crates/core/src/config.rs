//! Experiment configuration: one TOML file per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cox::IntensitySpec;
use crate::error::{Error, Result};
use crate::eta::EtaModel;
use crate::fp_counting::{CountingFpProblem, SolverSettings, DEFAULT_TAIL};
use crate::fp_general::{GeneralFpProblem, DEFAULT_WORD_CAP};
use crate::grid::{Bounds, GridFunction, TimeGrid};
use crate::jumps::JumpDistribution;
use crate::lattice::{auto_depth, StateLattice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    /// Directory that relative table paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub bounds: Bounds,
    pub grid: TimeGrid,
    pub eta: EtaModel,
    pub lambda: LambdaSpec,
    #[serde(default = "JumpDistribution::unit")]
    pub nu: JumpDistribution,
}

/// Local intensity `lambda(t, x)`; closed forms are clipped to `[L, U]` and
/// evaluated at cell midpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LambdaSpec {
    Constant { value: f64 },
    /// `intercept + slope * x`.
    AffineState { intercept: f64, slope: f64 },
    /// `base + amplitude * sin(2 pi t / period)`, the same for every state.
    TimeSinusoid { base: f64, amplitude: f64, period: f64 },
    /// Headerless CSV, one row per state: `state, v_0, ..., v_{n-1}`.
    Table { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    Counting,
    General,
}

/// Truncation depth `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Depth {
    Fixed(usize),
    Auto(AutoDepth),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AutoDepth {
    Auto,
}

impl Depth {
    pub fn fixed(&self) -> Option<usize> {
        match self {
            Depth::Fixed(k) => Some(*k),
            Depth::Auto(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub mode: SolverMode,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    pub mc_paths: usize,
    #[serde(default = "default_depth")]
    pub max_jumps: Depth,
    #[serde(default = "default_word_cap")]
    pub word_cap: f64,
}

fn default_tol() -> f64 {
    SolverSettings::default().tol
}
fn default_max_iter() -> usize {
    SolverSettings::default().max_iter
}
fn default_damping() -> f64 {
    SolverSettings::default().damping
}
fn default_depth() -> Depth {
    Depth::Auto(AutoDepth::Auto)
}
fn default_word_cap() -> f64 {
    DEFAULT_WORD_CAP
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            tol: self.tol,
            max_iter: self.max_iter,
            damping: self.damping,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    Projection,
    ExpClocks,
    Martingale,
    Consistency,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    /// Empty means `{T/4, T/2, 3T/4, T}`.
    #[serde(default)]
    pub probe_times: Vec<f64>,
    /// Empty means `{T/2, T}`.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_tests")]
    pub tests: Vec<TestKind>,
    #[serde(default = "default_tv")]
    pub tv_threshold: f64,
}

fn default_n_paths() -> usize {
    10_000
}
fn default_tests() -> Vec<TestKind> {
    vec![TestKind::Projection, TestKind::ExpClocks, TestKind::Martingale]
}
fn default_tv() -> f64 {
    0.02
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_paths: default_n_paths(),
            probe_times: Vec::new(),
            checkpoints: Vec::new(),
            tests: default_tests(),
            tv_threshold: default_tv(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Jsonl]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_dir(),
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Worker threads; absent means all cores.
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Either fixed-point problem built from a config.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Counting(CountingFpProblem),
    General(GeneralFpProblem),
}

impl Problem {
    pub fn lattice(&self) -> StateLattice {
        match self {
            Problem::Counting(p) => p.lattice(),
            Problem::General(p) => p.lattice.clone(),
        }
    }

    pub fn lambda(&self) -> &IntensitySpec {
        match self {
            Problem::Counting(p) => &p.lambda,
            Problem::General(p) => &p.lambda,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| locate_key(text, s.start)).unwrap_or_else(|| "<document>".into());
            Error::config(field, e.message().to_string())
        })?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn horizon(&self) -> f64 {
        self.model.grid.horizon()
    }

    pub fn probe_times(&self) -> Vec<f64> {
        if self.verify.probe_times.is_empty() {
            let t = self.horizon();
            vec![0.25 * t, 0.5 * t, 0.75 * t, t]
        } else {
            self.verify.probe_times.clone()
        }
    }

    pub fn checkpoints(&self) -> Vec<f64> {
        if self.verify.checkpoints.is_empty() {
            let t = self.horizon();
            vec![0.5 * t, t]
        } else {
            self.verify.checkpoints.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        Bounds::new(m.bounds.lower, m.bounds.upper).map_err(|e| Error::config("model.bounds", e.to_string()))?;
        TimeGrid::new(m.grid.horizon(), m.grid.n_steps()).map_err(|e| Error::config("model.grid", e.to_string()))?;
        m.eta.validate(&m.bounds).map_err(|e| Error::config("model.eta", e.to_string()))?;
        match &m.lambda {
            LambdaSpec::Constant { value } => {
                if !m.bounds.contains(*value) {
                    return Err(Error::config("model.lambda.value", "must lie in [L, U]"));
                }
            }
            LambdaSpec::AffineState { intercept, slope } => {
                if !intercept.is_finite() || !slope.is_finite() {
                    return Err(Error::config("model.lambda", "coefficients must be finite"));
                }
            }
            LambdaSpec::TimeSinusoid { base, amplitude, period } => {
                if !base.is_finite() || !amplitude.is_finite() || !(*period > 0.0) {
                    return Err(Error::config("model.lambda", "need finite base/amplitude and period > 0"));
                }
            }
            LambdaSpec::Table { path } => {
                let full = self.base_dir.join(path);
                if !full.is_file() {
                    return Err(Error::config("model.lambda.path", format!("file {} does not exist", full.display())));
                }
            }
        }
        let s = &self.solver;
        if s.mode == SolverMode::Counting && !m.nu.is_unit() {
            return Err(Error::config("solver.mode", "counting mode requires nu = delta_1"));
        }
        if !(s.tol > 0.0) {
            return Err(Error::config("solver.tol", "must be positive"));
        }
        if s.max_iter == 0 {
            return Err(Error::config("solver.max_iter", "must be at least 1"));
        }
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            return Err(Error::config("solver.damping", "must lie in (0, 1]"));
        }
        if s.mc_paths < 1000 {
            return Err(Error::config("solver.mc_paths", "need at least 1000 Monte Carlo paths"));
        }
        if s.max_jumps.fixed() == Some(0) {
            return Err(Error::config("solver.max_jumps", "must be at least 1"));
        }
        if !(s.word_cap >= 1.0) {
            return Err(Error::config("solver.word_cap", "must be at least 1"));
        }
        let v = &self.verify;
        if v.n_paths < 1000 {
            return Err(Error::config("verify.n_paths", "need at least 1000 paths"));
        }
        let t = self.horizon();
        for (i, &p) in v.probe_times.iter().enumerate() {
            if !(p > 0.0 && p <= t) || m.grid.node_index(p).is_none() {
                return Err(Error::config(format!("verify.probe_times[{i}]"), "must be a grid node in (0, T]"));
            }
        }
        for (i, &c) in v.checkpoints.iter().enumerate() {
            if !(c > 0.0 && c <= t) || (i > 0 && c <= v.checkpoints[i - 1]) {
                return Err(Error::config(format!("verify.checkpoints[{i}]"), "must be increasing within (0, T]"));
            }
        }
        if !(v.tv_threshold > 0.0 && v.tv_threshold < 1.0) {
            return Err(Error::config("verify.tv_threshold", "must lie in (0, 1)"));
        }
        if self.runtime.threads == Some(0) {
            return Err(Error::config("runtime.threads", "must be at least 1"));
        }
        Ok(())
    }

    /// `lambda(., x)` for every state value of `states`.
    pub fn lambda_spec(&self, states: &[f64]) -> Result<IntensitySpec> {
        let m = &self.model;
        let grid = m.grid;
        let b = m.bounds;
        let mids = |f: &dyn Fn(f64) -> f64| {
            GridFunction::new(grid, (0..grid.n_steps()).map(|i| b.clamp(f(grid.midpoint(i)))).collect())
        };
        let rows: Vec<GridFunction> = match &m.lambda {
            LambdaSpec::Constant { value } => states.iter().map(|_| GridFunction::constant(grid, *value)).collect(),
            LambdaSpec::AffineState { intercept, slope } => states
                .iter()
                .map(|&x| mids(&|_| intercept + slope * x))
                .collect::<Result<_>>()?,
            LambdaSpec::TimeSinusoid { base, amplitude, period } => {
                let row = mids(&|t| base + amplitude * (std::f64::consts::TAU * t / period).sin())?;
                states.iter().map(|_| row.clone()).collect()
            }
            LambdaSpec::Table { path } => {
                let table = read_lambda_table(&self.base_dir.join(path), grid)?;
                states
                    .iter()
                    .map(|&x| {
                        table
                            .iter()
                            .find(|(s, _)| (s - x).abs() < 1e-9)
                            .map(|(_, f)| f.clone())
                            .ok_or_else(|| Error::config("model.lambda.path", format!("no row for state {x}")))
                    })
                    .collect::<Result<_>>()?
            }
        };
        IntensitySpec::new(rows, b).map_err(|e| Error::config("model.lambda", e.to_string()))
    }

    pub fn problem(&self) -> Result<Problem> {
        let m = &self.model;
        let s = &self.solver;
        let k = s
            .max_jumps
            .fixed()
            .unwrap_or_else(|| auto_depth(&m.bounds, m.grid.horizon(), DEFAULT_TAIL));
        let lattice = StateLattice::build(&m.nu, k)?;
        let lambda = self.lambda_spec(lattice.states())?;
        let by_state = |x: f64| lambda.lambda[lattice.ordinal(x).expect("lattice state")].clone();
        match s.mode {
            SolverMode::Counting => Ok(Problem::Counting(CountingFpProblem::new(
                m.eta.clone(),
                m.bounds,
                m.grid,
                s.mc_paths,
                Some(k),
                |level| by_state(level as f64),
            )?)),
            SolverMode::General => Ok(Problem::General(GeneralFpProblem::new(
                m.eta.clone(),
                m.nu.clone(),
                m.bounds,
                m.grid,
                s.mc_paths,
                Some(k),
                s.word_cap,
                by_state,
            )?)),
        }
    }

    /// SHA-256 over the canonical JSON of everything that determines results
    /// (output location and thread count excluded), plus any table contents.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        let obj = value.as_object_mut().expect("config is an object");
        obj.remove("output");
        obj.remove("runtime");
        obj.remove("seed");
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&value)?);
        if let LambdaSpec::Table { path } = &self.model.lambda {
            hasher.update(fs::read(self.base_dir.join(path))?);
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

fn read_lambda_table(path: &Path, grid: TimeGrid) -> Result<Vec<(f64, GridFunction)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let nums: Vec<f64> = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("model.lambda.path[row {r}]"), e.to_string()))?;
        if nums.len() != grid.n_steps() + 1 {
            return Err(Error::config(
                format!("model.lambda.path[row {r}]"),
                format!("expected state + {} values, got {} fields", grid.n_steps(), nums.len()),
            ));
        }
        rows.push((nums[0], GridFunction::new(grid, nums[1..].to_vec())?));
    }
    Ok(rows)
}

/// Dotted key path of the table/key that encloses byte `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if pos > offset {
            break;
        }
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            if !trimmed.starts_with('#') {
                key = k.trim().to_string();
            }
        }
        pos += line.len();
    }
    match (section.is_empty(), key.is_empty()) {
        (true, true) => "<document>".into(),
        (true, false) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const COUNTING: &str = r#"
seed = 7

[model]
bounds = { lower = 1.0, upper = 2.0 }
grid = { horizon = 1.0, n_steps = 50 }
eta = { kind = "random-constant", values = [1.0, 2.0], probs = [0.5, 0.5] }
lambda = { kind = "constant", value = 1.0 }

[solver]
mode = "counting"
mc_paths = 2000
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, Path::new("."))
    }

    #[test]
    fn parses_with_defaults() {
        let c = parse(COUNTING).unwrap();
        assert_eq!(c.solver.max_jumps, Depth::Auto(AutoDepth::Auto));
        assert_eq!(c.verify.tests.len(), 3);
        assert_eq!(c.probe_times(), vec![0.25, 0.5, 0.75, 1.0]);
        assert!(c.model.nu.is_unit());
    }

    #[test]
    fn round_trip_is_identical() {
        let c = parse(COUNTING).unwrap();
        let again = parse(&c.to_toml_string()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn hash_ignores_output_and_threads() {
        let mut c = parse(COUNTING).unwrap();
        let h = c.hash().unwrap();
        c.output.directory = "elsewhere".into();
        c.runtime.threads = Some(3);
        assert_eq!(c.hash().unwrap(), h);
        c.solver.tol = 1e-5;
        assert_ne!(c.hash().unwrap(), h);
    }

    #[test]
    fn counting_mode_rejects_general_jumps() {
        let text = COUNTING.replace("[solver]", "nu = { atoms = [1.0, -1.0], probs = [0.5, 0.5] }\n\n[solver]");
        match parse(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "solver.mode"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_their_field() {
        let text = COUNTING.replace("mc_paths = 2000", "mc_paths = 10");
        assert!(matches!(parse(&text), Err(Error::Config { field, .. }) if field == "solver.mc_paths"));
        let text = COUNTING.replace("n_steps = 50", "n_steps = \"many\"");
        assert!(matches!(parse(&text), Err(Error::Config { field, .. }) if field == "model.grid"));
        let text = COUNTING.replace("value = 1.0 }", "value = 5.0 }");
        assert!(matches!(parse(&text), Err(Error::Config { field, .. }) if field == "model.lambda.value"));
    }

    #[test]
    fn explicit_depth_and_table() {
        let dir = tempfile::tempdir().unwrap();
        let rows: String = (0..=3).map(|x| format!("{x},{}\n", ["1.5"; 4].join(","))).collect();
        fs::write(dir.path().join("lambda.csv"), rows).unwrap();
        let text = COUNTING
            .replace("n_steps = 50", "n_steps = 4")
            .replace(r#"lambda = { kind = "constant", value = 1.0 }"#, r#"lambda = { kind = "table", path = "lambda.csv" }"#)
            .replace("mc_paths = 2000", "mc_paths = 2000\nmax_jumps = 3");
        let c = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap();
        match c.problem().unwrap() {
            Problem::Counting(p) => {
                assert_eq!(p.max_level, 3);
                assert_eq!(p.lambda.lambda[2].cell(1), 1.5);
            }
            Problem::General(_) => panic!("counting expected"),
        }
    }

    #[test]
    fn missing_table_is_reported() {
        let text = COUNTING.replace(r#"lambda = { kind = "constant", value = 1.0 }"#, r#"lambda = { kind = "table", path = "nope.csv" }"#);
        assert!(matches!(parse(&text), Err(Error::Config { field, .. }) if field == "model.lambda.path"));
    }
}
