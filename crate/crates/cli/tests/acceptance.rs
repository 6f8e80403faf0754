//! End-to-end acceptance run on the two-state reference problem. Prints one
//! line per criterion and exits nonzero if any of them fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hjs_core::coupling::CouplingMatrix;
use hjs_core::expr::Expr;
use hjs_core::markov::PathEnsemble;
use hjs_core::models::HamiltonianFamily;
use hjs_core::pde::{
    apriori_bounds_check, reference_problem, solve_fd, solve_semilagrangian, GridField, ProblemInstance, Resolution,
};
use hjs_core::random_min::{
    adjoint_curve, construct_minimizer, dynamics_residual_screened, expected_action, relaxation_lower_bound,
    CurvatureScreen, MinimizerContext,
};
use hjs_core::verify::{
    calibration_study, check_comparison, check_derivative_formula, check_markov_statistics, check_nonexpansive,
    check_semiconcavity, check_semigroup, probe_points, scheme_tolerance, Budget,
};

const SEED: u64 = 20240601;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

type Criterion = fn(&Shared) -> Result<Outcome, String>;

/// Reference field at the working resolution, shared by several criteria.
struct Shared {
    problem: ProblemInstance,
    resolution: Resolution,
    field: GridField,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn scheme_agreement(s: &Shared) -> Result<Outcome, String> {
    let started = Instant::now();
    let fd = solve_fd(&s.problem, &s.resolution).map_err(err)?;
    let elapsed = started.elapsed();
    let fd_dt = fd.meta().dt;
    let gap = sup_diff(fd.last_slice(), s.field.last_slice());
    let tol = (3.0 * s.resolution.dx).max(3.0 * fd_dt);
    Ok(Outcome::new(
        gap <= tol && elapsed < Duration::from_secs(60),
        format!("sup |fd - sl| at T = {gap:.4e} <= {tol:.4e} (fd dt {fd_dt:.3e}, {elapsed:.1?})"),
    ))
}

fn collapsed_problem() -> Result<ProblemInstance, String> {
    let b = CouplingMatrix::symmetric_two_state(1.0).map_err(err)?;
    let u0 = vec![Expr::parse("0.5*x^2").map_err(err)?; 2];
    ProblemInstance::new(b, HamiltonianFamily::free(1, 2), u0, 1.0, 4.0).map_err(err)
}

fn collapse_oracle(s: &Shared) -> Result<Outcome, String> {
    let problem = collapsed_problem()?;
    let res = s.resolution;
    let sl = solve_semilagrangian(&problem, &res).map_err(err)?;
    let fd = solve_fd(&problem, &res).map_err(err)?;
    let error = |f: &GridField| {
        let grid = f.grid();
        (0..grid.len())
            .filter(|&k| grid.node(k)[0].abs() <= 2.0 + 1e-12)
            .flat_map(|k| {
                let x = grid.node(k)[0];
                let exact = x * x / 4.0;
                (0..2).map(move |i| (f.node_value(f.steps(), k, i) - exact).abs())
            })
            .fold(0.0, f64::max)
    };
    let (e_sl, e_fd) = (error(&sl), error(&fd));
    let tol = 3.0 * res.dx;
    Ok(Outcome::new(
        e_sl <= tol && e_fd <= tol,
        format!("max error at t=1 on |x|<=2: sl {e_sl:.4e}, fd {e_fd:.4e} <= {tol:.4e}"),
    ))
}

fn apriori_bounds(s: &Shared) -> Result<Outcome, String> {
    let r = apriori_bounds_check(&s.field, &s.problem).map_err(err)?;
    let tol = scheme_tolerance(&s.problem, &s.resolution);
    let worst = r.lower_slack.min(r.upper_slack);
    Ok(Outcome::new(
        -worst <= tol,
        format!("lower slack {:.4e}, upper slack {:.4e}, tolerance {tol:.4e}", r.lower_slack, r.upper_slack),
    ))
}

fn contraction(s: &Shared) -> Result<Outcome, String> {
    let budget = Budget::full(SEED).with_resolution(s.resolution);
    let a = check_nonexpansive(&s.problem, &budget).map_err(err)?;
    let b = check_comparison(&s.problem, &budget).map_err(err)?;
    Ok(Outcome::new(
        a.passed && b.passed,
        format!(
            "{} pairs: expansion {:.3e} <= {:.3e}, ordering violation {:.3e} <= {:.3e}",
            budget.random_pairs, a.measured, a.tolerance, b.measured, b.tolerance
        ),
    ))
}

fn semigroup(s: &Shared) -> Result<Outcome, String> {
    let budget = Budget::full(SEED).with_resolution(s.resolution);
    let r = check_semigroup(&s.problem, &budget).map_err(err)?;
    Ok(Outcome::new(r.passed, format!("{:.3e} <= {:.3e}; {}", r.measured, r.tolerance, r.witness.unwrap_or_default())))
}

fn markov(s: &Shared) -> Result<Outcome, String> {
    let budget = Budget::full(SEED);
    let started = Instant::now();
    let r = check_markov_statistics(&s.problem, &budget).map_err(err)?;
    let elapsed = started.elapsed();
    Ok(Outcome::new(
        r.passed && elapsed < Duration::from_secs(30),
        format!("{} paths: worst {:.3}σ <= 3σ ({elapsed:.1?})", budget.chain_paths, r.measured),
    ))
}

/// Mean action and relaxed value at every probe point and initial index.
struct ActionRow {
    i: usize,
    x: f64,
    value: f64,
    action: (f64, f64),
    relaxed: (f64, f64),
}

fn action_rows(s: &Shared, paths: usize) -> Result<Vec<ActionRow>, String> {
    let ctx = MinimizerContext::new(&s.problem, &s.field, s.resolution.dt).map_err(err)?;
    let mut rows = Vec::new();
    for i in 0..s.problem.m() {
        let ensemble = PathEnsemble::sample(s.problem.coupling(), i, s.problem.horizon(), paths, SEED + 10 + i as u64);
        for x in probe_points(&s.problem) {
            let value = s.field.evaluate(s.problem.horizon(), x, i).map_err(err)?;
            let a = expected_action(&ctx, &ensemble, x, i).map_err(err)?;
            let r = relaxation_lower_bound(&s.problem, &ensemble, x, i, &s.resolution).map_err(err)?;
            rows.push(ActionRow { i, x: x[0], value, action: (a.mean, a.std_error), relaxed: (r.mean, r.std_error) });
        }
    }
    Ok(rows)
}

fn butterfly_and_relaxation(s: &Shared) -> Result<(Outcome, Outcome), String> {
    let started = Instant::now();
    let rows = action_rows(s, 10_000)?;
    let elapsed = started.elapsed();
    let slack = 5.0 * (s.resolution.dx + s.resolution.dt);
    let worst = |f: &dyn Fn(&ActionRow) -> f64| {
        rows.iter().map(|r| (f(r), r)).max_by(|a, b| a.0.total_cmp(&b.0)).map(|(v, r)| (v, r.i, r.x)).unwrap()
    };
    let (b, bi, bx) = worst(&|r| (r.action.0 - r.value).abs() - 3.0 * r.action.1);
    let (o, oi, ox) = worst(&|r| r.relaxed.0 - r.value - 3.0 * r.relaxed.1);
    let butterfly = Outcome::new(
        b <= slack && elapsed < Duration::from_secs(600),
        format!(
            "{} points, 10^4 paths: worst |mean - u| - 3se = {b:.4e} (i={bi}, x={bx}) <= {slack:.4e} ({elapsed:.1?})",
            rows.len()
        ),
    );
    let ordering =
        Outcome::new(o <= slack, format!("worst relaxed - u - 3se = {o:.4e} (i={oi}, x={ox}) <= {slack:.4e}"));
    Ok((butterfly, ordering))
}

fn calibration(s: &Shared) -> Result<Outcome, String> {
    let fine = s.resolution.halved();
    let fine_field = solve_semilagrangian(&s.problem, &fine).map_err(err)?;
    let (coarse_max, _) = calibration_study(&s.problem, &s.field, s.resolution.dt, 100, SEED + 20).map_err(err)?;
    let (fine_max, _) = calibration_study(&s.problem, &fine_field, fine.dt, 100, SEED + 20).map_err(err)?;
    let tol = 5.0 * scheme_tolerance(&s.problem, &s.resolution);
    let ratio = fine_max / coarse_max;
    Ok(Outcome::new(
        coarse_max <= tol && (0.35..=0.65).contains(&ratio),
        format!("max residual {coarse_max:.4e} <= {tol:.4e}; after halving {fine_max:.4e}, ratio {ratio:.3} in [0.35, 0.65]"),
    ))
}

/// Pooled median momentum residual, worst velocity residual and largest
/// adjoint jump inside a segment over twenty spread minimizers.
fn dynamics_at(problem: &ProblemInstance, res: Resolution) -> Result<(f64, f64, f64), String> {
    let field = solve_semilagrangian(problem, &res).map_err(err)?;
    let ctx = MinimizerContext::new(problem, &field, res.dt).map_err(err)?;
    let screen = CurvatureScreen::new(&field);
    let ensemble = PathEnsemble::sample(problem.coupling(), 0, problem.horizon(), 20, SEED + 30);
    let span = 0.1875 * problem.half_width();
    let (mut residuals, mut velocity, mut increment) = (Vec::new(), 0.0f64, 0.0f64);
    for (k, path) in ensemble.paths().iter().enumerate() {
        let x = -span + 2.0 * span * k as f64 / 19.0;
        let sample = construct_minimizer(&ctx, path, [x, 0.0]).map_err(err)?;
        let adjoint = adjoint_curve(&sample, problem).map_err(err)?;
        let report = dynamics_residual_screened(&sample, &adjoint, &screen, problem).map_err(err)?;
        residuals.extend(report.momentum);
        velocity = velocity.max(report.velocity_max);
        increment = increment.max(adjoint.interior_increment());
    }
    residuals.sort_by(f64::total_cmp);
    let median = residuals.get(residuals.len() / 2).copied().unwrap_or(f64::NAN);
    Ok((median, velocity, increment))
}

fn dynamics(s: &Shared) -> Result<Outcome, String> {
    let coarse = Resolution::new(0.004, 0.1);
    let fine = Resolution::new(0.001, 0.05);
    let (median, velocity, inc_coarse) = dynamics_at(&s.problem, coarse)?;
    let (_, velocity_fine, inc_fine) = dynamics_at(&s.problem, fine)?;
    let tol = 10.0 * (coarse.dx + coarse.dt);
    let velocity = velocity.max(velocity_fine);
    Ok(Outcome::new(
        velocity <= 1e-10 && median <= tol && inc_fine < inc_coarse,
        format!(
            "velocity residual {velocity:.1e}; momentum median {median:.4e} <= {tol:.3}; \
             interior adjoint jump {inc_coarse:.4} -> {inc_fine:.4} under refinement"
        ),
    ))
}

fn derivative(s: &Shared) -> Result<Outcome, String> {
    let budget = Budget::full(SEED).with_resolution(s.resolution);
    let r = check_derivative_formula(&s.problem, &budget).map_err(err)?;
    Ok(Outcome::new(r.passed, r.witness.unwrap_or_default()))
}

fn semiconcavity(s: &Shared) -> Result<Outcome, String> {
    let budget = Budget::full(SEED).with_resolution(s.resolution);
    let r = check_semiconcavity(&s.problem, &s.field, &budget);
    Ok(Outcome::new(
        r.passed,
        format!("worst excess {:.4e} <= {:.4e}; {}", r.measured, r.tolerance, r.witness.unwrap_or_default()),
    ))
}

fn verify_once(config: &Path, out: &Path) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_hjs"))
        .arg("--out")
        .arg(out)
        .arg("verify")
        .arg(config)
        .output()
        .map_err(err)?;
    if !status.status.success() {
        return Err(format!("verify exited with {:?}", status.status.code()));
    }
    std::fs::read(out.join("verify.json")).map_err(err)
}

fn determinism(_: &Shared) -> Result<Outcome, String> {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let dir = tempfile::tempdir().map_err(err)?;
    let first = verify_once(&config, &dir.path().join("a"))?;
    let second = verify_once(&config, &dir.path().join("b"))?;
    Ok(Outcome::new(first == second, format!("verify.json: {} bytes, identical: {}", first.len(), first == second)))
}

fn main() -> ExitCode {
    let problem = reference_problem();
    let resolution = Resolution::new(0.02, 0.05);
    let field = match solve_semilagrangian(&problem, &resolution) {
        Ok(f) => f,
        Err(e) => {
            println!("acceptance: reference solve failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let shared = Shared { problem, resolution, field };

    let mut lines: Vec<(usize, &str, Result<Outcome, String>)> = Vec::new();
    let criteria: [(usize, &str, Criterion); 4] = [
        (1, "scheme cross-validation", scheme_agreement),
        (2, "symmetric collapse oracle", collapse_oracle),
        (3, "a-priori bounds", apriori_bounds),
        (4, "nonexpansiveness and comparison", contraction),
    ];
    for (n, name, f) in criteria {
        lines.push((n, name, f(&shared)));
    }
    lines.push((5, "semigroup gap", semigroup(&shared)));
    lines.push((6, "markov statistics", markov(&shared)));
    match butterfly_and_relaxation(&shared) {
        Ok((b, o)) => {
            lines.push((7, "expected action matches the value", Ok(b)));
            lines.push((8, "relaxation ordering", Ok(o)));
        }
        Err(e) => {
            lines.push((7, "expected action matches the value", Err(e.clone())));
            lines.push((8, "relaxation ordering", Err(e)));
        }
    }
    let rest: [(usize, &str, Criterion); 5] = [
        (9, "calibration", calibration),
        (10, "dynamics diagnostics", dynamics),
        (11, "derivative formula", derivative),
        (12, "semiconcavity", semiconcavity),
        (13, "determinism", determinism),
    ];
    for (n, name, f) in rest {
        lines.push((n, name, f(&shared)));
    }

    let mut failed = 0;
    for (n, name, outcome) in &lines {
        match outcome {
            Ok(o) => {
                if !o.passed {
                    failed += 1;
                }
                println!("AC{n:<2} {:<4} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            }
            Err(e) => {
                failed += 1;
                println!("AC{n:<2} FAIL {name}: error: {e}");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
