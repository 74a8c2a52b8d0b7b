//! Experiment configuration and the `fockhier` command line.
//!
//! One TOML file describes one experiment. Every command writes its outputs
//! plus a `manifest.json` (config digest, code version, seed, integrator,
//! digests of the written files) into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fock::{assemble_from_correlations, check_budget, word_at, FockVector, DEFAULT_BUDGET};
use crate::inverse::{identity_catalog, CatalogOptions, CheckStatus, IdentityResult};
use crate::model::{build_oscillator_model, validate_kernels, Boundary, IndexSpace, KernelSet, OscillatorParams};
use crate::oracle::{
    estimate_mtcf, simulate, Dynamics, EnsembleKind, EnsembleSpec, IntegratorMeta, ModelScheme, MtcfTable,
    OscillatorDynamics, WaveDynamics,
};
use crate::solver::{
    closed_equation_solve, lower_triangular_expansion, perturbation_series, rational_solve, Assumption,
    LevelResidual, Method, PerturbOptions, RationalForm, RationalOptions, SolveReport,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_MISMATCH: i32 = 2;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Truncation level `L`.
    #[serde(default = "default_level")]
    pub level: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_level() -> usize {
    4
}

/// Time-grid oscillator; see [`OscillatorParams`].
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub omega: f64,
    pub dt: f64,
    pub points: usize,
    pub lambda: f64,
    #[serde(default)]
    pub q: f64,
    pub forcing: Vec<f64>,
    #[serde(default = "default_lags")]
    pub lags: Vec<f64>,
    #[serde(default)]
    pub boundary: Boundary,
}

fn default_lags() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SeedMode {
    /// The free solution.
    #[default]
    Free,
    /// The generating vector assembled from the oracle's correlation table.
    Oracle,
    /// A generating vector read from `seed_file`.
    File,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub order: usize,
    pub tolerance: f64,
    pub symmetrized: bool,
    pub seed_mode: SeedMode,
    pub seed_file: Option<PathBuf>,
    pub assumption: Assumption,
    pub form: RationalForm,
    pub chi: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Perturb,
            order: 2,
            tolerance: 0.0,
            symmetrized: false,
            seed_mode: SeedMode::Free,
            seed_file: None,
            assumption: Assumption::Projected,
            form: RationalForm::Plain,
            chi: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    /// Row-by-row solve of the configured model.
    #[default]
    Model,
    Oscillator,
    Wave,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKindConfig {
    #[default]
    Pinned,
    Gaussian,
    Hybrid,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub kind: EnsembleKindConfig,
    /// Mean of the Gaussian coordinates (pinned kind: the pinned values).
    pub mean: Option<Vec<f64>>,
    /// Diagonal covariance; alternative to `cov`.
    pub variance: Option<Vec<f64>>,
    pub cov: Option<Vec<Vec<f64>>>,
    /// `[coordinate, value]` pairs for the hybrid kind.
    pub pinned: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OscillatorConfig {
    pub omega: f64,
    pub lambda: f64,
    pub dt: f64,
    pub stride: usize,
    pub points: usize,
    #[serde(default = "one")]
    pub sites: usize,
    #[serde(default = "one")]
    pub components: usize,
    pub forcing: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WaveConfig {
    pub points: usize,
    pub length: f64,
    pub speed: f64,
    pub cfl: f64,
    pub stride: usize,
    pub records: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub dynamics: DynamicsKind,
    pub samples: usize,
    pub seed: u64,
    /// Highest word length estimated; defaults to the truncation level.
    pub max_order: Option<usize>,
    pub smearing: Option<Vec<f64>>,
    pub boundary_rows: usize,
    pub ensemble: EnsembleConfig,
    pub oscillator: Option<OscillatorConfig>,
    pub wave: Option<WaveConfig>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            dynamics: DynamicsKind::Model,
            samples: 10_000,
            seed: 42,
            max_order: None,
            smearing: None,
            boundary_rows: 2,
            ensemble: EnsembleConfig::default(),
            oscillator: None,
            wave: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Allowed `|Δ|` in units of the oracle's standard error.
    pub sigma: f64,
    /// Absolute allowance added to `sigma·stderr`.
    pub abs: f64,
    /// Highest level compared; defaults to the solver's trusted levels.
    pub max_level: Option<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { sigma: 3.0, abs: 1e-9, max_level: None }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("fockhier-out") }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.forcing.len() != m.points {
            return Err(Error::Config(format!("model.forcing has {} entries, model.points is {}", m.forcing.len(), m.points)));
        }
        if !m.lambda.is_finite() || !m.q.is_finite() || !m.omega.is_finite() {
            return Err(Error::Config("model parameters must be finite".into()));
        }
        check_budget(m.points, self.level, DEFAULT_BUDGET)?;
        if self.oracle.samples < 2 {
            return Err(Error::Config("oracle.samples must be at least 2".into()));
        }
        if self.compare.sigma < 0.0 || self.compare.abs < 0.0 {
            return Err(Error::Config("compare tolerances must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<(IndexSpace, KernelSet)> {
        let m = &self.model;
        let p = OscillatorParams {
            omega: m.omega,
            dt: m.dt,
            points: m.points,
            lambda: m.lambda,
            q: m.q,
            forcing: m.forcing.clone(),
            lags: m.lags.clone(),
            boundary: m.boundary,
        };
        build_oscillator_model(&p)
    }

    pub fn oracle_order(&self) -> usize {
        self.oracle.max_order.unwrap_or(self.level)
    }

    pub fn build_dynamics(&self) -> Result<Dynamics> {
        let o = &self.oracle;
        match o.dynamics {
            DynamicsKind::Model => {
                let (space, kernels) = self.build_model()?;
                Ok(Dynamics::ModelScheme(ModelScheme { space, kernels, boundary_rows: o.boundary_rows }))
            }
            DynamicsKind::Oscillator => {
                let c = o.oscillator.as_ref().ok_or_else(|| Error::Config("oracle.oscillator section is required".into()))?;
                Ok(Dynamics::Oscillator(OscillatorDynamics {
                    omega: c.omega,
                    lambda: c.lambda,
                    dt: c.dt,
                    stride: c.stride,
                    points: c.points,
                    sites: c.sites,
                    components: c.components,
                    forcing: c.forcing.clone().unwrap_or_else(|| vec![0.0; c.components]),
                }))
            }
            DynamicsKind::Wave => {
                let c = o.wave.as_ref().ok_or_else(|| Error::Config("oracle.wave section is required".into()))?;
                Ok(Dynamics::Wave(WaveDynamics {
                    points: c.points,
                    length: c.length,
                    speed: c.speed,
                    cfl: c.cfl,
                    stride: c.stride,
                    records: c.records,
                }))
            }
        }
    }

    pub fn build_ensemble(&self, dim: usize) -> Result<EnsembleSpec> {
        let e = &self.oracle.ensemble;
        let cov_of = |n: usize| -> Result<DMatrix<f64>> {
            match (&e.cov, &e.variance) {
                (Some(_), Some(_)) => Err(Error::Config("give either oracle.ensemble.cov or .variance, not both".into())),
                (Some(rows), None) => {
                    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                        return Err(Error::Config(format!("oracle.ensemble.cov must be {n}x{n}")));
                    }
                    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
                }
                (None, Some(v)) => {
                    if v.len() != n {
                        return Err(Error::Config(format!("oracle.ensemble.variance must have {n} entries")));
                    }
                    Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v)))
                }
                (None, None) => Ok(DMatrix::zeros(n, n)),
            }
        };
        let mean_of = |n: usize| -> Result<Vec<f64>> {
            match &e.mean {
                Some(m) if m.len() != n => Err(Error::Config(format!("oracle.ensemble.mean must have {n} entries"))),
                Some(m) => Ok(m.clone()),
                None => Ok(vec![0.0; n]),
            }
        };
        let kind = match e.kind {
            EnsembleKindConfig::Pinned => {
                let values = mean_of(dim)?;
                EnsembleKind::HybridDelta { pinned: values.into_iter().enumerate().collect(), mean: vec![], cov: DMatrix::zeros(0, 0) }
            }
            EnsembleKindConfig::Gaussian => EnsembleKind::Gaussian { mean: mean_of(dim)?, cov: cov_of(dim)? },
            EnsembleKindConfig::Hybrid => {
                let rest = dim.checked_sub(e.pinned.len()).ok_or_else(|| Error::Config("more pinned coordinates than coordinates".into()))?;
                EnsembleKind::HybridDelta { pinned: e.pinned.clone(), mean: mean_of(rest)?, cov: cov_of(rest)? }
            }
        };
        Ok(EnsembleSpec { kind, samples: self.oracle.samples, seed: self.oracle.seed, smearing: self.oracle.smearing.clone() })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorMeta>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects output files and writes them together with the manifest.
struct Writer {
    dir: PathBuf,
    manifest: Manifest,
}

impl Writer {
    fn new(dir: &Path, command: &str, config_text: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config_sha256: sha256_hex(config_text.as_bytes()),
                seed: None,
                samples: None,
                integrator: None,
                outputs: BTreeMap::new(),
            },
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        self.manifest.outputs.insert(name.into(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }

    fn finish(self) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        std::fs::write(self.dir.join("manifest.json"), s)?;
        Ok(())
    }
}

/// Runs the configured oracle.
pub fn run_oracle(cfg: &ExperimentConfig) -> Result<(Dynamics, EnsembleSpec, MtcfTable)> {
    let dynamics = cfg.build_dynamics()?;
    let ensemble = cfg.build_ensemble(dynamics.coordinate_dim())?;
    let traj = simulate(&dynamics, &ensemble)?;
    log::info!("simulated {} samples with {}", traj.samples, traj.meta.scheme);
    let table = estimate_mtcf(&traj, cfg.oracle_order(), ensemble.smearing.as_deref())?;
    Ok((dynamics, ensemble, table))
}

/// Runs the configured solver.
pub fn run_solver(cfg: &ExperimentConfig) -> Result<SolveReport> {
    let (space, kernels) = cfg.build_model().map_err(|e| e.in_stage("model"))?;
    let l = cfg.level;
    let s = &cfg.solver;
    let seed = match s.seed_mode {
        SeedMode::Free => None,
        SeedMode::Oracle => {
            if cfg.oracle.dynamics != DynamicsKind::Model {
                return Err(Error::Config("oracle seeds need oracle.dynamics = \"model\"".into()));
            }
            let (_, _, table) = run_oracle(cfg).map_err(|e| e.in_stage("oracle"))?;
            Some(assemble_from_correlations(&table.correlation_table(), &space, l)?)
        }
        SeedMode::File => {
            let path = s.seed_file.as_ref().ok_or_else(|| Error::Config("solver.seed_file is required for seed_mode = \"file\"".into()))?;
            Some(FockVector::from_json_str(&std::fs::read_to_string(path)?)?)
        }
    };
    let solved = match s.method {
        Method::Free => {
            let opts = PerturbOptions { order: 0, tolerance: 0.0, symmetrized: false, seed: None };
            let mut r = perturbation_series(&space, &kernels.with_lambda(0.0), l, &opts)?;
            r.method = Method::Free;
            r.residual_per_level = crate::solver::residual(&r.v, &space, &kernels)?;
            Ok(r)
        }
        Method::Perturb => perturbation_series(&space, &kernels, l, &PerturbOptions { order: s.order, tolerance: s.tolerance, symmetrized: s.symmetrized, seed }),
        Method::Triangular => {
            let seed = match seed {
                Some(v) => Some(crate::inverse::right_inverse_nq(&space, &kernels)?.projector.apply(&v)?),
                None => None,
            };
            lower_triangular_expansion(&space, &kernels, l, seed)
        }
        Method::Closed => closed_equation_solve(&space, &kernels, l, s.chi.as_deref(), s.assumption),
        Method::Rational => {
            let unit = kernels.with_lambda(0.0);
            rational_solve(&space, &unit, l, kernels.lambda, &RationalOptions { form: s.form, symmetrized: s.symmetrized, m_loc: None })
        }
    };
    solved.map_err(|e| e.in_stage("solver"))
}

#[derive(Clone, Debug, Serialize)]
pub struct WordDiff {
    pub word: String,
    pub level: usize,
    pub solver: f64,
    pub oracle: f64,
    pub stderr: f64,
    pub diff: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub pass: bool,
    pub levels: Vec<usize>,
    pub words_compared: usize,
    pub max_abs_diff: f64,
    /// Largest `|Δ|/stderr` over words with nonzero standard error.
    pub max_sigma: f64,
    pub sigma: f64,
    pub abs: f64,
    pub residual_per_level: Vec<LevelResidual>,
    pub words: Vec<WordDiff>,
}

pub fn run_compare(cfg: &ExperimentConfig) -> Result<(Comparison, SolveReport, MtcfTable, EnsembleSpec, Dynamics)> {
    if cfg.oracle.dynamics != DynamicsKind::Model {
        return Err(Error::Config("compare needs oracle.dynamics = \"model\" so labels match".into()));
    }
    let report = run_solver(cfg)?;
    let (dynamics, ensemble, table) = run_oracle(cfg).map_err(|e| e.in_stage("oracle"))?;
    let (space, _) = cfg.build_model()?;
    let top = [Some(cfg.oracle_order()), report.trusted_levels, cfg.compare.max_level, Some(cfg.level)]
        .into_iter()
        .flatten()
        .min()
        .unwrap_or(0);
    let d = space.dim();
    let mut words = Vec::new();
    for n in 1..=top {
        for (idx, &x) in report.v.level(n).iter().enumerate() {
            let w = word_at(d, n, idx);
            let e = table.get(&w).expect("oracle covers compared levels");
            let diff = (x - e.value).abs();
            let pass = diff <= cfg.compare.sigma * e.stderr + cfg.compare.abs;
            let label: Vec<String> = w.iter().map(|&l| space.describe(l)).collect();
            words.push(WordDiff { word: label.join(" "), level: n, solver: x, oracle: e.value, stderr: e.stderr, diff, pass });
        }
    }
    let max_abs_diff = words.iter().map(|w| w.diff).fold(0.0, f64::max);
    let max_sigma = words.iter().filter(|w| w.stderr > 0.0).map(|w| w.diff / w.stderr).fold(0.0, f64::max);
    let cmp = Comparison {
        pass: words.iter().all(|w| w.pass),
        levels: (1..=top).collect(),
        words_compared: words.len(),
        max_abs_diff,
        max_sigma,
        sigma: cfg.compare.sigma,
        abs: cfg.compare.abs,
        residual_per_level: report.residual_per_level.clone(),
        words,
    };
    Ok((cmp, report, table, ensemble, dynamics))
}

fn solution_csv(v: &FockVector, space: &IndexSpace) -> String {
    let mut s = String::from("level,word,value\n");
    for n in 0..=v.max_level() {
        for (idx, x) in v.level(n).iter().enumerate() {
            let w: Vec<String> = word_at(v.d(), n, idx).iter().map(|&l| space.describe(l)).collect();
            s.push_str(&format!("{n},\"{}\",{x:e}\n", w.join(" ")));
        }
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "fockhier", version, about = "Correlation-function hierarchies in free Fock space")]
pub struct Cli {
    /// Worker threads for ensemble simulation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Kernel diagnostics.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
    /// Operator identity catalog.
    Algebra {
        #[command(subcommand)]
        action: AlgebraAction,
    },
    /// Solve the truncated hierarchy.
    Solve(SolveArgs),
    /// Ensemble simulation and correlation estimates.
    Oracle {
        #[command(subcommand)]
        action: OracleAction,
    },
    /// Solver against oracle, word by word.
    Compare {
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ModelAction {
    Validate { config: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum AlgebraAction {
    Check {
        config: PathBuf,
        /// Truncation level for the checks (default: config `level`).
        #[arg(long)]
        level: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub config: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sym: bool,
    #[arg(long, value_enum)]
    pub seed_mode: Option<SeedMode>,
    #[arg(long)]
    pub seed_file: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown method `{s}` (free, perturb, triangular, closed, rational)"))
}

#[derive(Debug, Subcommand)]
pub enum OracleAction {
    Run {
        config: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_order: Option<usize>,
        /// Comma-separated weights over time shifts.
        #[arg(long, value_delimiter = ',')]
        smear: Option<Vec<f64>>,
    },
}

fn load(path: &Path) -> Result<(ExperimentConfig, String)> {
    ExperimentConfig::load(path).map_err(|e| e.in_stage("config"))
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone())
}

fn summary_line(r: &IdentityResult) -> String {
    let status = match r.status {
        CheckStatus::Pass => "pass",
        CheckStatus::Fail => "FAIL",
        CheckStatus::Skipped => "skip",
        CheckStatus::Error => "error",
        CheckStatus::Info => "info",
    };
    let res = r.max_residual.map(|x| format!("{x:.2e}")).unwrap_or_else(|| "-".into());
    let why = r.reason.as_deref().map(|s| format!(" ({s})")).unwrap_or_default();
    format!("{status:5} {:40} {res}{why}", r.id)
}

/// Runs one command; returns the process exit code.
pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Model { action: ModelAction::Validate { config } } => {
            let (cfg, text) = load(config)?;
            let (space, kernels) = cfg.build_model().map_err(|e| e.in_stage("model"))?;
            let report = validate_kernels(&space, &kernels).map_err(|e| e.in_stage("model"))?;
            print!("{}", report.to_text());
            let mut w = Writer::new(&out_dir(cli, &cfg), "model validate", &text)?;
            w.write_json("model.json", &report)?;
            w.finish()?;
            Ok(EXIT_OK)
        }
        Command::Algebra { action: AlgebraAction::Check { config, level } } => {
            let (cfg, text) = load(config)?;
            let (space, kernels) = cfg.build_model().map_err(|e| e.in_stage("model"))?;
            let opts = CatalogOptions { chi: cfg.solver.chi.clone() };
            let results = identity_catalog(&space, &kernels, level.unwrap_or(cfg.level), &opts);
            for r in &results {
                println!("{}", summary_line(r));
            }
            let mut w = Writer::new(&out_dir(cli, &cfg), "algebra check", &text)?;
            w.write_json("algebra.json", &results)?;
            w.finish()?;
            let failed = results.iter().any(|r| r.status == CheckStatus::Fail);
            Ok(if failed { EXIT_MISMATCH } else { EXIT_OK })
        }
        Command::Solve(args) => {
            let (mut cfg, text) = load(&args.config)?;
            if let Some(m) = args.method {
                cfg.solver.method = m;
            }
            if let Some(o) = args.order {
                cfg.solver.order = o;
            }
            if let Some(t) = args.tol {
                cfg.solver.tolerance = t;
            }
            if let Some(l) = args.lambda {
                cfg.model.lambda = l;
            }
            if args.sym {
                cfg.solver.symmetrized = true;
            }
            if let Some(m) = args.seed_mode {
                cfg.solver.seed_mode = m;
            }
            if args.seed_file.is_some() {
                cfg.solver.seed_file = args.seed_file.clone();
            }
            cfg.validate().map_err(|e| e.in_stage("config"))?;
            let (space, _) = cfg.build_model()?;
            let mut w = Writer::new(&out_dir(cli, &cfg), "solve", &text)?;
            let report = match run_solver(&cfg) {
                Ok(r) => r,
                Err(Error::Stage { stage, source }) => match *source {
                    Error::SeriesDiverging { order, partial } => {
                        w.write_json("solution.json", &partial)?;
                        w.finish()?;
                        return Err(Error::SeriesDiverging { order, partial }.in_stage(stage));
                    }
                    e => return Err(e.in_stage(stage)),
                },
                Err(e) => return Err(e),
            };
            println!(
                "method {:?}, trusted levels {:?}, max trusted residual {:.3e}",
                report.method,
                report.trusted_levels,
                report.max_trusted_residual()
            );
            w.write_json("solution.json", &report)?;
            w.write("solution.csv", &solution_csv(&report.v, &space))?;
            w.finish()?;
            Ok(EXIT_OK)
        }
        Command::Oracle { action: OracleAction::Run { config, samples, seed, max_order, smear } } => {
            let (mut cfg, text) = load(config)?;
            if let Some(s) = samples {
                cfg.oracle.samples = *s;
            }
            if let Some(s) = seed {
                cfg.oracle.seed = *s;
            }
            if let Some(m) = max_order {
                cfg.oracle.max_order = Some(*m);
            }
            if smear.is_some() {
                cfg.oracle.smearing = smear.clone();
            }
            cfg.validate().map_err(|e| e.in_stage("config"))?;
            let (dynamics, ensemble, table) = run_oracle(&cfg).map_err(|e| e.in_stage("oracle"))?;
            let space = dynamics.index_space()?;
            let mut w = Writer::new(&out_dir(cli, &cfg), "oracle run", &text)?;
            w.manifest.seed = Some(ensemble.seed);
            w.manifest.samples = Some(ensemble.samples);
            w.manifest.integrator = Some(integrator_of(&dynamics));
            w.write("mtcf.csv", &table.to_csv(&space))?;
            w.finish()?;
            println!("{} words estimated from {} samples", table.entries.len(), table.samples);
            Ok(EXIT_OK)
        }
        Command::Compare { config } => {
            let (cfg, text) = load(config)?;
            let (cmp, report, table, ensemble, dynamics) = run_compare(&cfg)?;
            let space = dynamics.index_space()?;
            let mut w = Writer::new(&out_dir(cli, &cfg), "compare", &text)?;
            w.manifest.seed = Some(ensemble.seed);
            w.manifest.samples = Some(ensemble.samples);
            w.manifest.integrator = Some(integrator_of(&dynamics));
            w.write_json("comparison.json", &cmp)?;
            w.write_json("solution.json", &report)?;
            w.write("mtcf.csv", &table.to_csv(&space))?;
            w.finish()?;
            println!(
                "{}: {} words on levels {:?}, max |Δ| {:.3e}, max |Δ|/stderr {:.2}",
                if cmp.pass { "pass" } else { "FAIL" },
                cmp.words_compared,
                cmp.levels,
                cmp.max_abs_diff,
                cmp.max_sigma
            );
            Ok(if cmp.pass { EXIT_OK } else { EXIT_MISMATCH })
        }
    }
}

fn integrator_of(dynamics: &Dynamics) -> IntegratorMeta {
    // A single zero-offset run is enough to read the metadata.
    let ens = EnsembleSpec::pinned(&vec![0.0; dynamics.coordinate_dim()], 1, 0);
    match simulate(dynamics, &ens) {
        Ok(t) => t.meta,
        Err(_) => IntegratorMeta { scheme: "unknown".into(), dt: 0.0, steps: 0 },
    }
}

/// Entry point shared by the binary and the tests.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    let run = || execute(&cli);
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(Error::Config(e.to_string())),
        },
        None => run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
