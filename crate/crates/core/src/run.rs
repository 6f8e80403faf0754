//! Run orchestration: each command writes its artifacts and a manifest with
//! checksums into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ValidatedConfig};
use crate::markov::{MarkovError, PathEnsemble};
use crate::pde::{
    apriori_bounds_check, solve_fd, solve_semilagrangian, BoundsReport, GridField, Resolution, SolverError,
};
use crate::random_min::{
    adjoint_curve, construct_minimizer, dynamics_residual_screened, per_interval_calibration, CurvatureScreen,
    Estimate, MinimizerContext, MinimizerError,
};
use crate::verify::{run_all, Budget, BudgetKind, CheckReport, VerifyError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Minimizer(#[from] MinimizerError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    MissingPrerequisite(String),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
    #[error("integrity: {0}")]
    Integrity(String),
}

impl RunError {
    /// Process exit code; the map is listed in the README.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(ConfigError::Parse { .. }) => 2,
            Self::Config(ConfigError::Validation(_)) => 3,
            Self::Config(ConfigError::Io { .. }) | Self::Io { .. } | Self::Integrity(_) => 7,
            Self::Solver(_) | Self::Verify(VerifyError::Solver(_)) | Self::Verify(VerifyError::Coupling(_)) => 4,
            Self::Minimizer(_)
            | Self::Markov(_)
            | Self::Verify(VerifyError::Minimizer(_))
            | Self::Verify(VerifyError::Markov(_)) => 5,
            Self::ChecksFailed { .. } => 6,
            Self::MissingPrerequisite(_) => 8,
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub wall_seconds: f64,
    pub peak_memory_kb: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    pub stats: RunStats,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// High-water resident set size of this process, where the platform reports it.
pub fn peak_memory_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Collects written artifacts and finishes with the manifest.
struct Outputs {
    dir: PathBuf,
    command: &'static str,
    config_sha256: String,
    seed: u64,
    started: Instant,
    artifacts: Vec<Artifact>,
}

impl Outputs {
    fn open(dir: &Path, command: &'static str, cfg: &ValidatedConfig) -> Result<Self, RunError> {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            config_sha256: sha256_hex(cfg.config.source.as_bytes()),
            seed: cfg.seed,
            started: Instant::now(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(io_error(&path))?;
        self.artifacts.push(Artifact { path: name.into(), sha256: sha256_hex(contents), bytes: contents.len() as u64 });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable report");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn finish(self) -> Result<RunManifest, RunError> {
        let manifest = RunManifest {
            command: self.command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: self.config_sha256,
            seed: self.seed,
            artifacts: self.artifacts,
            stats: RunStats { wall_seconds: self.started.elapsed().as_secs_f64(), peak_memory_kb: peak_memory_kb() },
        };
        let path = self.dir.join(RunManifest::file_name(self.command));
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest") + "\n";
        std::fs::write(&path, text).map_err(io_error(&path))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeChoice {
    SemiLagrangian,
    FiniteDifference,
    Both,
}

impl std::str::FromStr for SchemeChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sl" | "semi-lagrangian" => Ok(Self::SemiLagrangian),
            "fd" | "finite-difference" => Ok(Self::FiniteDifference),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown scheme `{other}` (expected sl, fd or both)")),
        }
    }
}

pub fn field_file(tag: &str) -> String {
    format!("field_{tag}.csv")
}

#[derive(Debug, Clone, Serialize)]
struct SchemeSummary {
    scheme: &'static str,
    levels: usize,
    dt: f64,
    cfl_bound: Option<f64>,
    bounds: BoundsReport,
}

#[derive(Debug, Clone, Serialize)]
struct SolveSummary {
    resolution: Resolution,
    lipschitz: f64,
    q_max: f64,
    schemes: Vec<SchemeSummary>,
    /// Sup distance at the final time when both schemes ran.
    scheme_distance: Option<f64>,
}

/// Solves with the chosen schemes; writes `field_<scheme>.csv` and
/// `solve_summary.json`.
pub fn run_solve(cfg: &ValidatedConfig, out: &Path, scheme: SchemeChoice) -> Result<RunManifest, RunError> {
    let mut outputs = Outputs::open(out, "solve", cfg)?;
    let p = &cfg.problem;
    let mut fields = Vec::new();
    if scheme != SchemeChoice::FiniteDifference {
        fields.push(("sl", solve_semilagrangian(p, &cfg.resolution)?));
    }
    if scheme != SchemeChoice::SemiLagrangian {
        fields.push(("fd", solve_fd(p, &cfg.resolution)?));
    }
    let mut schemes = Vec::new();
    for (tag, field) in &fields {
        let bounds = apriori_bounds_check(field, p)?;
        outputs.write(&field_file(tag), field.to_csv().as_bytes())?;
        schemes.push(SchemeSummary {
            scheme: tag,
            levels: field.times().len(),
            dt: field.meta().dt,
            cfl_bound: field.meta().cfl_bound,
            bounds,
        });
    }
    let scheme_distance = match fields.as_slice() {
        [(_, a), (_, b)] => Some(a.final_distance(b, p.half_width())),
        _ => None,
    };
    let summary = SolveSummary {
        resolution: cfg.resolution,
        lipschitz: p.lipschitz(),
        q_max: p.q_max(),
        schemes,
        scheme_distance,
    };
    outputs.write_json("solve_summary.json", &summary)?;
    outputs.finish()
}

pub const PATHS_FILE: &str = "paths.txt";

#[derive(Debug, Clone, Serialize)]
struct SampleSummary {
    initial_state: usize,
    paths: usize,
    seed: u64,
    mean_jumps: f64,
    terminal_law: Vec<f64>,
    exact_terminal_law: Vec<f64>,
}

fn sample_ensemble(cfg: &ValidatedConfig) -> PathEnsemble {
    let p = &cfg.problem;
    let mc = &cfg.config.monte_carlo;
    PathEnsemble::sample(p.coupling(), mc.initial_state, p.horizon(), mc.paths, cfg.seed)
}

/// Samples the index paths; writes `paths.txt` and `paths_summary.json`.
pub fn run_sample(cfg: &ValidatedConfig, out: &Path) -> Result<RunManifest, RunError> {
    let mut outputs = Outputs::open(out, "sample", cfg)?;
    let p = &cfg.problem;
    let ensemble = sample_ensemble(cfg);
    let i = ensemble.initial_state();
    let exact = p.coupling().transition_matrix(p.horizon()).map_err(VerifyError::from)?;
    let summary = SampleSummary {
        initial_state: i,
        paths: ensemble.len(),
        seed: cfg.seed,
        mean_jumps: ensemble.mean_jump_count()?,
        terminal_law: ensemble.state_law(p.horizon(), p.m())?,
        exact_terminal_law: exact.row_slice(i).to_vec(),
    };
    outputs.write(PATHS_FILE, ensemble.to_text().as_bytes())?;
    outputs.write_json("paths_summary.json", &summary)?;
    outputs.finish()
}

/// Per-start summary of `minimize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeSummary {
    pub start: Vec<f64>,
    pub initial_state: usize,
    pub paths: usize,
    pub mean: f64,
    pub std_error: f64,
    pub pde_value: f64,
    pub butterfly_gap: f64,
    pub calibration_max: f64,
    pub dynamics_median: Option<f64>,
}

/// Loads the solved field from `out`, preferring the semi-Lagrangian one.
pub fn load_field(out: &Path) -> Result<(PathBuf, GridField), RunError> {
    for tag in ["sl", "fd"] {
        let path = out.join(field_file(tag));
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io_error(&path))?;
            return Ok((path, GridField::from_csv(&text)?));
        }
    }
    Err(RunError::MissingPrerequisite(format!(
        "no solved field in {}; run `hjs solve` with the same config first",
        out.display()
    )))
}

/// Builds minimizing random curves from every start point along the
/// ensemble (read from `paths.txt` when present); writes per-path curve
/// CSVs and `minimize_summary.json`.
pub fn run_minimize(cfg: &ValidatedConfig, out: &Path) -> Result<RunManifest, RunError> {
    let (field_path, field) = load_field(out)?;
    let p = &cfg.problem;
    let g = field.grid();
    let consistent = field.m() == p.m()
        && g.dim() == p.dim()
        && (g.half_width() - p.half_width()).abs() <= 1e-12 * p.half_width()
        && (field.end_time() - p.horizon()).abs() <= 1e-9 * (1.0 + p.horizon());
    if !consistent {
        return Err(RunError::MissingPrerequisite(format!(
            "{} was solved for a different problem; rerun `hjs solve`",
            field_path.display()
        )));
    }
    let mut outputs = Outputs::open(out, "minimize", cfg)?;
    let paths_path = out.join(PATHS_FILE);
    let ensemble = if paths_path.exists() {
        let text = std::fs::read_to_string(&paths_path).map_err(io_error(&paths_path))?;
        PathEnsemble::from_text(&text)?
    } else {
        sample_ensemble(cfg)
    };
    let i = ensemble.initial_state();
    let ctx = MinimizerContext::new(p, &field, cfg.resolution.dt)?;
    let screen = CurvatureScreen::new(&field);
    let mut summaries = Vec::new();
    for (s, x) in cfg.starts().into_iter().enumerate() {
        let results = ensemble
            .paths()
            .par_iter()
            .map(|path| {
                let sample = construct_minimizer(&ctx, path, x)?;
                let calibration = per_interval_calibration(&sample, &field, p);
                let momentum = if p.lagrangians().is_quadratic() {
                    let adjoint = adjoint_curve(&sample, p)?;
                    dynamics_residual_screened(&sample, &adjoint, &screen, p)?.momentum
                } else {
                    Vec::new()
                };
                Ok((sample, calibration, momentum))
            })
            .collect::<Result<Vec<_>, MinimizerError>>()?;
        for (k, (sample, _, _)) in results.iter().take(cfg.config.monte_carlo.curve_files).enumerate() {
            outputs.write(&format!("curve_s{s}_p{k}.csv"), sample.curve.to_csv().as_bytes())?;
        }
        let actions: Vec<f64> = results.iter().map(|r| r.0.action).collect();
        let estimate = Estimate::from_values(&actions);
        let pde_value = field.evaluate(p.horizon(), x, i)?;
        let mut momentum: Vec<f64> = results.iter().flat_map(|r| r.2.iter().copied()).collect();
        momentum.sort_by(f64::total_cmp);
        summaries.push(MinimizeSummary {
            start: x[..p.dim()].to_vec(),
            initial_state: i,
            paths: ensemble.len(),
            mean: estimate.mean,
            std_error: estimate.std_error,
            pde_value,
            butterfly_gap: estimate.mean - pde_value,
            calibration_max: results.iter().map(|r| r.1).fold(0.0, f64::max),
            dynamics_median: (!momentum.is_empty()).then(|| momentum[momentum.len() / 2]),
        });
    }
    outputs.write_json("minimize_summary.json", &summaries)?;
    outputs.finish()
}

pub const VERIFY_FILE: &str = "verify.json";

/// Budget of a `verify` run: `full` uses the configured resolution, `small`
/// doubles both spacings.
pub fn verify_budget(cfg: &ValidatedConfig, kind: BudgetKind) -> Budget {
    let r = cfg.resolution;
    let resolution = match kind {
        BudgetKind::Full => r,
        BudgetKind::Small => Resolution { dx: 2.0 * r.dx, dt: 2.0 * r.dt, fd_dt: r.fd_dt.map(|d| 2.0 * d) },
    };
    Budget::of_kind(kind, cfg.seed).with_resolution(resolution)
}

/// Runs the verification suite; writes `verify.json`. Failing checks are
/// reported in the result, not as an error.
pub fn run_verify(
    cfg: &ValidatedConfig,
    out: &Path,
    budget: &Budget,
) -> Result<(RunManifest, Vec<CheckReport>), RunError> {
    let mut outputs = Outputs::open(out, "verify", cfg)?;
    let reports = run_all(&cfg.problem, budget)?;
    outputs.write_json(VERIFY_FILE, &reports)?;
    Ok((outputs.finish()?, reports))
}

/// Re-reads every manifest in `dir` and checks artifact sizes and hashes.
/// Returns a readable summary.
pub fn report(dir: &Path) -> Result<String, RunError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_error(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("manifest_") && n.ends_with(".json"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(RunError::MissingPrerequisite(format!("no run manifests in {}", dir.display())));
    }
    let mut text = String::new();
    let mut problems = Vec::new();
    for path in names {
        let raw = std::fs::read_to_string(&path).map_err(io_error(&path))?;
        let manifest: RunManifest = serde_json::from_str(&raw)
            .map_err(|e| RunError::Integrity(format!("{}: unreadable manifest: {e}", path.display())))?;
        text.push_str(&format!(
            "{} (version {}, seed {}, config {}, {:.2} s, peak {} kB)\n",
            manifest.command,
            manifest.tool_version,
            manifest.seed,
            &manifest.config_sha256[..12.min(manifest.config_sha256.len())],
            manifest.stats.wall_seconds,
            manifest.stats.peak_memory_kb.map_or("?".to_string(), |k| k.to_string()),
        ));
        for a in &manifest.artifacts {
            let file = dir.join(&a.path);
            let status = match std::fs::read(&file) {
                Ok(bytes) if bytes.len() as u64 == a.bytes && sha256_hex(&bytes) == a.sha256 => "ok",
                Ok(_) => "MODIFIED",
                Err(_) => "MISSING",
            };
            if status != "ok" {
                problems.push(format!("{} {}", a.path, status.to_lowercase()));
            }
            text.push_str(&format!("  {:<8} {:>12} {}\n", status, a.bytes, a.path));
        }
    }
    let verify = dir.join(VERIFY_FILE);
    if let Ok(raw) = std::fs::read_to_string(&verify) {
        if let Ok(reports) = serde_json::from_str::<Vec<serde_json::Value>>(&raw) {
            let passed = reports.iter().filter(|r| r["passed"] == serde_json::Value::Bool(true)).count();
            text.push_str(&format!("verify: {passed} of {} checks passed\n", reports.len()));
        }
    }
    if problems.is_empty() {
        Ok(text)
    } else {
        Err(RunError::Integrity(problems.join(", ")))
    }
}
