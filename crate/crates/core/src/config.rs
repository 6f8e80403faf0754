//! TOML run configuration: problem, resolution, Monte Carlo and output blocks.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::CouplingMatrix;
use crate::expr::Expr;
use crate::models::{
    CoercivityReport, CosineMode, CosinePotential, Hamiltonian, HamiltonianFamily, TabulatedHamiltonian,
};
use crate::pde::{FdSolver, ProblemInstance, Resolution};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation(msg.into())
}

/// A cosine frequency: a number in one dimension, a pair in two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Frequency {
    Scalar(f64),
    Vector([f64; 2]),
}

impl Frequency {
    fn as_point(self) -> [f64; 2] {
        match self {
            Self::Scalar(k) => [k, 0.0],
            Self::Vector(k) => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// `½|p|² + Σ_k a_k cos(<f_k, x> + φ_k)`.
    QuadraticCosine {
        #[serde(default)]
        amplitudes: Vec<f64>,
        #[serde(default)]
        frequencies: Vec<Frequency>,
        #[serde(default)]
        phases: Vec<f64>,
    },
    /// CSV table with header `x,p,h`, path relative to the config file.
    Tabulated { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default = "one")]
    pub dim: usize,
    pub horizon: f64,
    pub half_width: f64,
    /// Row-major coupling matrix `B`.
    pub coupling: Vec<Vec<f64>>,
    /// One expression per component.
    pub initial: Vec<String>,
    pub hamiltonians: Vec<HamiltonianSpec>,
}

fn one() -> usize {
    1
}

/// Spacing given directly (`dx`) or as cells per half-width (`cells`); time
/// step as `dt` or as a number of `steps` over the horizon.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionSpec {
    pub dx: Option<f64>,
    pub cells: Option<usize>,
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    /// Finite-difference step; the CFL bound when absent.
    pub fd_dt: Option<f64>,
    /// Overrides the derived velocity truncation.
    pub q_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub initial_state: usize,
    /// Start points of `minimize`, one coordinate list per point.
    #[serde(default = "default_starts")]
    pub starts: Vec<Vec<f64>>,
    /// Number of per-path curve files written per start point.
    #[serde(default = "default_curve_files")]
    pub curve_files: usize,
}

fn default_paths() -> usize {
    1000
}

fn default_starts() -> Vec<Vec<f64>> {
    vec![vec![0.0]]
}

fn default_curve_files() -> usize {
    3
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        Self { paths: default_paths(), initial_state: 0, starts: default_starts(), curve_files: default_curve_files() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { directory: default_directory() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; there is no clock-based fallback.
    pub seed: Option<u64>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub resolution: ResolutionSpec,
    #[serde(default)]
    pub monte_carlo: MonteCarloSpec,
    #[serde(default)]
    pub output: OutputSpec,
    /// Directory of the config file, for relative table paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// Raw file contents, hashed into run manifests.
    #[serde(skip)]
    pub source: String,
}

/// A configuration with its problem built and checked.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub config: RunConfig,
    pub problem: ProblemInstance,
    pub resolution: Resolution,
    pub seed: u64,
    pub coercivity: CoercivityReport,
}

impl ValidatedConfig {
    pub fn starts(&self) -> Vec<[f64; 2]> {
        self.config.monte_carlo.starts.iter().map(|s| [s[0], s.get(1).copied().unwrap_or(0.0)]).collect()
    }
}

/// Reads, parses and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ValidatedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let config = parse_config(&text, &base)?;
    validate(config)
}

/// Parses TOML text; `base_dir` resolves relative table paths.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    let mut config: RunConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
        ConfigError::Parse { line, message: e.message().to_string() }
    })?;
    config.base_dir = base_dir.to_path_buf();
    config.source = text.to_string();
    Ok(config)
}

fn build_family(config: &RunConfig) -> Result<HamiltonianFamily, ConfigError> {
    let p = &config.problem;
    let mut members = Vec::with_capacity(p.hamiltonians.len());
    for (i, spec) in p.hamiltonians.iter().enumerate() {
        members.push(match spec {
            HamiltonianSpec::QuadraticCosine { amplitudes, frequencies, phases } => {
                let n = amplitudes.len();
                if frequencies.len() != n || (!phases.is_empty() && phases.len() != n) {
                    return Err(invalid(format!(
                        "hamiltonian {i}: amplitudes, frequencies and phases must have equal lengths"
                    )));
                }
                let modes = (0..n)
                    .map(|k| CosineMode {
                        amplitude: amplitudes[k],
                        frequency: frequencies[k].as_point(),
                        phase: phases.get(k).copied().unwrap_or(0.0),
                    })
                    .collect();
                Hamiltonian::QuadraticCosine(CosinePotential::new(modes))
            }
            HamiltonianSpec::Tabulated { file } => {
                let path = config.base_dir.join(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| invalid(format!("hamiltonian {i}: table {} unreadable: {e}", path.display())))?;
                let table =
                    TabulatedHamiltonian::from_csv(&text).map_err(|e| invalid(format!("hamiltonian {i}: {e}")))?;
                Hamiltonian::Tabulated(Arc::new(table))
            }
        });
    }
    HamiltonianFamily::new(p.dim, members).map_err(|e| invalid(e.to_string()))
}

fn positive(name: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!("{name} = {v} must be positive")))
    }
}

/// Builds the problem and checks the seed, the coupling conditions,
/// coercivity, the resolution and the Monte Carlo block.
pub fn validate(config: RunConfig) -> Result<ValidatedConfig, ConfigError> {
    let seed = config.seed.ok_or_else(|| invalid("`seed` is required so that runs are reproducible"))?;
    let p = &config.problem;
    let coupling = CouplingMatrix::validate(&p.coupling).map_err(|e| invalid(format!("coupling: {e}")))?;
    let family = build_family(&config)?;
    let coercivity = family.coercivity_report().map_err(|e| invalid(format!("hamiltonians: {e}")))?;
    let initial = p
        .initial
        .iter()
        .enumerate()
        .map(|(i, s)| Expr::parse(s).map_err(|e| invalid(format!("initial[{i}] `{s}`: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut problem =
        ProblemInstance::new(coupling, family, initial, p.horizon, p.half_width).map_err(|e| invalid(e.to_string()))?;
    let r = &config.resolution;
    if let Some(q) = r.q_max {
        problem = problem.with_q_max(positive("resolution.q_max", q)?);
    }
    let dx = match (r.dx, r.cells) {
        (Some(dx), None) => positive("resolution.dx", dx)?,
        (None, Some(c)) if c > 0 => p.half_width / c as f64,
        (None, None) => return Err(invalid("resolution needs `dx` or `cells`")),
        _ => return Err(invalid("give exactly one of resolution.dx and a positive resolution.cells")),
    };
    let dt = match (r.dt, r.steps) {
        (Some(dt), None) => positive("resolution.dt", dt)?,
        (None, Some(n)) if n > 0 => p.horizon / n as f64,
        (None, None) => return Err(invalid("resolution needs `dt` or `steps`")),
        _ => return Err(invalid("give exactly one of resolution.dt and a positive resolution.steps")),
    };
    let grid = problem.grid(dx).map_err(|e| invalid(e.to_string()))?;
    let cfl = FdSolver::new(&problem, grid.dx()).map_err(|e| invalid(e.to_string()))?.cfl_bound();
    if let Some(fd_dt) = r.fd_dt {
        positive("resolution.fd_dt", fd_dt)?;
        if fd_dt > cfl {
            return Err(invalid(format!("resolution.fd_dt = {fd_dt} exceeds the CFL bound {cfl}")));
        }
    }
    if problem.q_max() * dt < grid.dx() * (problem.dim() as f64).sqrt() {
        return Err(invalid(format!(
            "Q_max·dt = {} is below dx·√N = {}: the velocity lattice is empty",
            problem.q_max() * dt,
            grid.dx() * (problem.dim() as f64).sqrt()
        )));
    }
    let mc = &config.monte_carlo;
    if mc.paths == 0 {
        return Err(invalid("monte_carlo.paths must be positive"));
    }
    if mc.initial_state >= problem.m() {
        return Err(invalid(format!("monte_carlo.initial_state {} out of range", mc.initial_state)));
    }
    for s in &mc.starts {
        if s.len() != problem.dim() || !grid.contains([s[0], s.get(1).copied().unwrap_or(0.0)]) {
            return Err(invalid(format!("start point {s:?} is not a point of the {}-dimensional box", problem.dim())));
        }
    }
    let resolution = Resolution { dx: grid.dx(), dt, fd_dt: r.fd_dt };
    Ok(ValidatedConfig { config, problem, resolution, seed, coercivity })
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = r#"
seed = 7

[problem]
horizon = 1.0
half_width = 8.0
coupling = [[1.0, -1.0], [-1.0, 1.0]]
initial = ["min(x^2, 4)", "min(|x|, 2)"]
hamiltonians = [
  { type = "quadratic_cosine", amplitudes = [0.3], frequencies = [1.0], phases = [0.0] },
  { type = "quadratic_cosine", amplitudes = [0.5], frequencies = [1.0], phases = [1.5707963267948966] },
]

[resolution]
dx = 0.05
dt = 0.1
"#;

    #[test]
    fn reference_config_is_valid() {
        let v = validate(parse_config(REFERENCE, Path::new(".")).unwrap()).unwrap();
        assert!((v.problem.lipschitz() - 4.5).abs() < 1e-6);
        assert_eq!(v.seed, 7);
        assert_eq!(v.config.monte_carlo.paths, 1000);
    }

    #[test]
    fn missing_seed_is_a_validation_error() {
        let text = REFERENCE.replace("seed = 7", "");
        let err = validate(parse_config(&text, Path::new(".")).unwrap()).unwrap_err();
        assert!(matches!(err, ConfigError::Validation(ref m) if m.contains("seed")));
    }

    #[test]
    fn bad_row_sum_names_the_condition() {
        let text = REFERENCE.replace("[-1.0, 1.0]]", "[-1.0, 2.0]]");
        let err = validate(parse_config(&text, Path::new(".")).unwrap()).unwrap_err();
        assert!(err.to_string().contains("sums to"), "{err}");
    }

    #[test]
    fn parse_errors_carry_a_line() {
        let err = parse_config("seed = 1\n[problem]\nhorizon = \"x\"\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn counts_replace_steps() {
        let text = REFERENCE.replace("dx = 0.05\ndt = 0.1", "cells = 160\nsteps = 10");
        let v = validate(parse_config(&text, Path::new(".")).unwrap()).unwrap();
        assert!((v.resolution.dx - 0.05).abs() < 1e-15 && (v.resolution.dt - 0.1).abs() < 1e-15);
    }

    #[test]
    fn cfl_precheck() {
        let text = REFERENCE.replace("dt = 0.1", "dt = 0.1\nfd_dt = 0.1");
        assert!(validate(parse_config(&text, Path::new(".")).unwrap()).is_err());
    }
}
