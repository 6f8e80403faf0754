//! `hjs`: solve, sample, minimize and verify weakly coupled Hamilton-Jacobi
//! systems described by a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hjs_core::config::{load_config, ValidatedConfig};
use hjs_core::pde::FdSolver;
use hjs_core::run::{self, RunError, RunManifest, SchemeChoice};
use hjs_core::verify::{render_table, BudgetKind};

#[derive(Parser)]
#[command(name = "hjs", version, about = "Weakly coupled Hamilton-Jacobi systems on a grid")]
struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (default: the config's `output.directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and check a config, then print the derived constants.
    Validate { config: PathBuf },
    /// Solve the system and write the field CSVs.
    Solve {
        config: PathBuf,
        /// sl, fd or both.
        #[arg(long, default_value = "sl")]
        scheme: SchemeChoice,
    },
    /// Sample the switching index paths.
    SamplePaths { config: PathBuf },
    /// Build minimizing random curves on a solved field.
    Minimize { config: PathBuf },
    /// Run the property checks; exits with 6 if any fails.
    Verify {
        config: PathBuf,
        /// small or full.
        #[arg(long, default_value = "small")]
        budget: BudgetKind,
    },
    /// Check the manifests and artifacts of an output directory.
    Report { dir: Option<PathBuf> },
}

fn load(cli: &Cli, path: &Path) -> Result<(ValidatedConfig, PathBuf), RunError> {
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.config.output.directory.clone());
    Ok((cfg, out))
}

fn print_manifest(m: &RunManifest, out: &Path) {
    println!("{}: {} artifacts in {} ({:.2} s)", m.command, m.artifacts.len(), out.display(), m.stats.wall_seconds);
    for a in &m.artifacts {
        println!("  {}  {}", &a.sha256[..16], a.path);
    }
}

fn describe(cfg: &ValidatedConfig) -> Result<String, RunError> {
    let p = &cfg.problem;
    let r = &cfg.resolution;
    let fd = FdSolver::new(p, r.dx)?;
    let lag = p.lagrangians();
    let mut s = format!(
        "equations: {}\ndimension: {}\nhorizon: {}\nhalf-width: {}\nseed: {}\n",
        p.m(),
        p.dim(),
        p.horizon(),
        p.half_width(),
        cfg.seed
    );
    s.push_str(&format!("gradient bound: {:.6}\nvelocity truncation: {:.6}\n", p.lipschitz(), p.q_max()));
    s.push_str(&format!("lagrangian infimum: {:.6}\nrest cost sup: {:.6}\n", lag.infimum(), lag.rest_cost_sup()));
    s.push_str(&format!("dx: {}\ndt: {}\nfd cfl bound: {:.6e}\n", r.dx, r.dt, fd.cfl_bound()));
    for (i, (a, b)) in cfg.coercivity.alpha.iter().zip(&cfg.coercivity.beta).enumerate() {
        s.push_str(&format!(
            "member {i}: {:.4} r² + {:.4} <= H <= {:.4} r² + {:.4}\n",
            a.quadratic, a.offset, b.quadratic, b.offset
        ));
    }
    Ok(s)
}

fn execute(cli: &Cli) -> Result<(), RunError> {
    match &cli.command {
        Command::Validate { config } => {
            let (cfg, _) = load(cli, config)?;
            print!("{}", describe(&cfg)?);
        }
        Command::Solve { config, scheme } => {
            let (cfg, out) = load(cli, config)?;
            print_manifest(&run::run_solve(&cfg, &out, *scheme)?, &out);
        }
        Command::SamplePaths { config } => {
            let (cfg, out) = load(cli, config)?;
            print_manifest(&run::run_sample(&cfg, &out)?, &out);
        }
        Command::Minimize { config } => {
            let (cfg, out) = load(cli, config)?;
            print_manifest(&run::run_minimize(&cfg, &out)?, &out);
        }
        Command::Verify { config, budget } => {
            let (cfg, out) = load(cli, config)?;
            let budget = run::verify_budget(&cfg, *budget);
            let (_, reports) = run::run_verify(&cfg, &out, &budget)?;
            print!("{}", render_table(&reports));
            println!("{}", serde_json::to_string_pretty(&reports).expect("serializable reports"));
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(RunError::ChecksFailed { failed, total: reports.len() });
            }
        }
        Command::Report { dir } => {
            let dir = dir.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
            print!("{}", run::report(&dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
