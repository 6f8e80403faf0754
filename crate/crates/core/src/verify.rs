//! Named property checks with measured margins: contraction and ordering of
//! the semi-Lagrangian scheme, the semigroup property, sub-optimality along
//! straight curves, the derivative formula along a switching chain, chain
//! statistics, a-priori bounds, semiconcavity and the random minimization
//! identities.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coupling::CouplingError;
use crate::grid::{Point, SpatialGrid};
use crate::markov::{binomial_sigma, path_rng, MarkovError, PathEnsemble};
use crate::pde::{
    apriori_bounds_check_with, solve_semilagrangian, FdSolver, GridField, ProblemInstance, Resolution, SlSolver,
    SolverError,
};
use crate::random_min::{
    construct_minimizer, expected_action, per_interval_calibration, relaxation_lower_bound, Estimate, MinimizerContext,
    MinimizerError,
};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Minimizer(#[from] MinimizerError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

/// Outcome of one check. `margin` is positive when the check passes and
/// `witness` names the worst point found.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub margin: f64,
    pub resolution: Resolution,
    pub seed: u64,
    pub witness: Option<String>,
}

impl CheckReport {
    /// Report for a quantity that must not exceed `tolerance`.
    fn at_most(name: &str, measured: f64, tolerance: f64, budget: &Budget, witness: String) -> Self {
        let margin = tolerance - measured;
        Self {
            name: name.into(),
            passed: margin >= 0.0,
            measured,
            tolerance,
            margin,
            resolution: budget.resolution,
            seed: budget.seed,
            witness: Some(witness),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetKind {
    Small,
    Full,
}

impl std::str::FromStr for BudgetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "small" => Ok(Self::Small),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown budget `{other}` (expected small or full)")),
        }
    }
}

/// Resolution, sample sizes and seed of a verification run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Budget {
    pub kind: BudgetKind,
    pub resolution: Resolution,
    pub seed: u64,
    pub random_pairs: usize,
    pub curve_samples: usize,
    pub action_paths: usize,
    pub chain_paths: usize,
    pub calibration_paths: usize,
    /// Runs the contraction and ordering checks with `exp(+hB)` in place of
    /// `exp(-hB)`. Only for mutation testing of the harness.
    pub reversed_coupling: bool,
}

impl Budget {
    pub fn small(seed: u64) -> Self {
        Self {
            kind: BudgetKind::Small,
            resolution: Resolution::new(0.04, 0.1),
            seed,
            random_pairs: 4,
            curve_samples: 8,
            action_paths: 500,
            chain_paths: 20_000,
            calibration_paths: 20,
            reversed_coupling: false,
        }
    }

    pub fn full(seed: u64) -> Self {
        Self {
            kind: BudgetKind::Full,
            resolution: Resolution::new(0.02, 0.05),
            seed,
            random_pairs: 10,
            curve_samples: 20,
            action_paths: 10_000,
            chain_paths: 100_000,
            calibration_paths: 100,
            reversed_coupling: false,
        }
    }

    pub fn of_kind(kind: BudgetKind, seed: u64) -> Self {
        match kind {
            BudgetKind::Small => Self::small(seed),
            BudgetKind::Full => Self::full(seed),
        }
    }

    pub fn with_resolution(mut self, resolution: Resolution) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn with_reversed_coupling(mut self, on: bool) -> Self {
        self.reversed_coupling = on;
        self
    }

    /// Stream-separated seed for one check.
    fn stream(&self, tag: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
    }
}

/// Default scheme tolerance `(Δx + Δt)(1 + κ)`.
pub fn scheme_tolerance(problem: &ProblemInstance, resolution: &Resolution) -> f64 {
    (resolution.dx + resolution.dt) * (1.0 + problem.lipschitz())
}

fn describe(grid: &SpatialGrid, t: f64, x: Point, i: usize) -> String {
    if grid.dim() == 1 {
        format!("t={t:.6} x={:.6} i={i}", x[0])
    } else {
        format!("t={t:.6} x=({:.6}, {:.6}) i={i}", x[0], x[1])
    }
}

/// Smooth bounded datum `Σ a sin(f·x + φ)` per component with random
/// frequencies and phases, scaled to Lipschitz constant at most `lipschitz`.
/// With `positive` each mode is shifted to `a (1 + sin(..))` with `a >= 0`.
fn random_datum(grid: &SpatialGrid, m: usize, lipschitz: f64, rng: &mut impl Rng, positive: bool) -> Vec<f64> {
    let modes: Vec<Vec<(f64, [f64; 2], f64)>> = (0..m)
        .map(|_| {
            let mut comp: Vec<(f64, [f64; 2], f64)> = (0..3)
                .map(|_| {
                    let a: f64 = rng.random_range(if positive { 0.0..1.0 } else { -1.0..1.0 });
                    let f = [rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
                    (a, f, rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            let slope: f64 = comp.iter().map(|(a, f, _)| a.abs() * f[0].hypot(f[1])).sum();
            if slope > 0.0 {
                comp.iter_mut().for_each(|c| c.0 *= lipschitz / slope);
            }
            comp
        })
        .collect();
    let mut out = Vec::with_capacity(grid.len() * m);
    for k in 0..grid.len() {
        let x = grid.node(k);
        for comp in &modes {
            let v: f64 = comp
                .iter()
                .map(|&(a, f, ph)| {
                    let arg = f[0] * x[0] + if grid.dim() == 2 { f[1] * x[1] } else { 0.0 } + ph;
                    if positive {
                        a * (1.0 + arg.sin())
                    } else {
                        a * arg.sin()
                    }
                })
                .sum();
            out.push(v);
        }
    }
    out
}

fn sl_solver<'a>(problem: &'a ProblemInstance, budget: &Budget) -> Result<SlSolver<'a>, VerifyError> {
    let r = budget.resolution;
    Ok(SlSolver::new(problem, r.dx, r.dt)?.with_reversed_coupling(budget.reversed_coupling))
}

/// Worst `max_x |u(t) - v(t)| - max_x |u⁰ - v⁰|` over random pairs with the
/// problem's Lipschitz bound and every level after the first.
pub fn check_nonexpansive(problem: &ProblemInstance, budget: &Budget) -> Result<CheckReport, VerifyError> {
    let solver = sl_solver(problem, budget)?;
    let grid = solver.grid();
    let m = problem.m();
    let slope = problem.lipschitz();
    let mut worst = f64::NEG_INFINITY;
    let mut scale: f64 = 1.0;
    let mut witness = String::new();
    for k in 0..budget.random_pairs {
        let mut rng = path_rng(budget.stream(1), k as u64);
        let base = random_datum(grid, m, slope, &mut rng, false);
        let other = random_datum(grid, m, slope, &mut rng, false);
        let d0 = base.iter().zip(&other).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        let fu = solver.run(base, 0.0, problem.horizon())?;
        let fv = solver.run(other, 0.0, problem.horizon())?;
        for (level, &t) in fu.times().iter().enumerate().skip(1) {
            let (a, b) = (fu.slice(level), fv.slice(level));
            for (idx, (x, y)) in a.iter().zip(b).enumerate() {
                scale = scale.max(x.abs()).max(y.abs());
                let excess = (x - y).abs() - d0;
                if excess > worst {
                    worst = excess;
                    witness = format!("pair {k}: {}", describe(grid, t, grid.node(idx / m), idx % m));
                }
            }
        }
    }
    let tolerance = 64.0 * f64::EPSILON * scale;
    Ok(CheckReport::at_most("nonexpansive", worst, tolerance, budget, witness))
}

/// Worst `v - w` over random ordered pairs `v⁰ <= w⁰` and all levels.
pub fn check_comparison(problem: &ProblemInstance, budget: &Budget) -> Result<CheckReport, VerifyError> {
    let solver = sl_solver(problem, budget)?;
    let grid = solver.grid();
    let m = problem.m();
    let slope = 0.5 * problem.lipschitz();
    let mut worst = f64::NEG_INFINITY;
    let mut scale: f64 = 1.0;
    let mut witness = String::new();
    for k in 0..budget.random_pairs {
        let mut rng = path_rng(budget.stream(2), k as u64);
        let lower = random_datum(grid, m, slope, &mut rng, false);
        let upper: Vec<f64> =
            lower.iter().zip(random_datum(grid, m, slope, &mut rng, true)).map(|(a, b)| a + b).collect();
        let fv = solver.run(lower, 0.0, problem.horizon())?;
        let fw = solver.run(upper, 0.0, problem.horizon())?;
        for (level, &t) in fv.times().iter().enumerate().skip(1) {
            for (idx, (v, w)) in fv.slice(level).iter().zip(fw.slice(level)).enumerate() {
                scale = scale.max(v.abs()).max(w.abs());
                if v - w > worst {
                    worst = v - w;
                    witness = format!("pair {k}: {}", describe(grid, t, grid.node(idx / m), idx % m));
                }
            }
        }
    }
    let tolerance = 64.0 * f64::EPSILON * scale;
    Ok(CheckReport::at_most("comparison", worst, tolerance, budget, witness))
}

/// `max |S(T)u⁰ - S(T/2)S(T/2)u⁰|` for the finite-difference scheme with an
/// odd number of steps on `[0, T]`, so that the two step grids differ.
fn semigroup_gap(problem: &ProblemInstance, dx: f64) -> Result<(f64, f64), VerifyError> {
    let fd = FdSolver::new(problem, dx)?;
    let horizon = problem.horizon();
    let mut steps = (horizon / fd.cfl_bound()).ceil().max(1.0) as usize;
    if steps.is_multiple_of(2) {
        steps += 1;
    }
    let half = steps.div_ceil(2);
    let initial = problem.initial_slice(fd.grid());
    let whole = fd.run_steps(initial.clone(), 0.0, steps, horizon / steps as f64)?;
    let first = fd.run_steps(initial, 0.0, half, 0.5 * horizon / half as f64)?;
    let second = fd.run_steps(first.last_slice().to_vec(), 0.5 * horizon, half, 0.5 * horizon / half as f64)?;
    let gap = whole.last_slice().iter().zip(second.last_slice()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    Ok((gap, horizon / steps as f64))
}

/// Semigroup gap at the budget spacing and at half of it. Passes when the
/// finer gap is below `3(Δx + Δt)κ` and the gap decays with order 0.8 or
/// better (or is already at round-off).
pub fn check_semigroup(problem: &ProblemInstance, budget: &Budget) -> Result<CheckReport, VerifyError> {
    let dx = budget.resolution.dx;
    let (coarse, _) = semigroup_gap(problem, dx)?;
    let (fine, dt) = semigroup_gap(problem, dx / 2.0)?;
    let tolerance = 3.0 * (dx / 2.0 + dt) * problem.lipschitz();
    let order = (coarse / fine).log2();
    let round_off = coarse <= 1e-12 * (1.0 + problem.initial_sup());
    let mut r = CheckReport::at_most(
        "semigroup",
        fine,
        tolerance,
        budget,
        format!("gap {coarse:.3e} at dx={dx}, {fine:.3e} at dx={}, order {order:.3}", dx / 2.0),
    );
    if !(round_off || order >= 0.8) {
        r.passed = false;
    }
    Ok(r)
}

/// `E_i[∫_0^h L_{ω(s)}(x + s q, -q) ds]` by Simpson's rule on each
/// constancy piece.
fn straight_action(problem: &ProblemInstance, ensemble: &PathEnsemble, x: Point, q: Point) -> Estimate {
    let values: Vec<f64> = ensemble
        .paths()
        .iter()
        .map(|path| {
            path.integrate_pieces(0.0, ensemble.horizon(), |s, a, b| {
                let l = problem.lagrangian(s);
                let at = |t: f64| l.value([x[0] + t * q[0], x[1] + t * q[1]], [-q[0], -q[1]]);
                (b - a) / 6.0 * (at(a) + 4.0 * at(0.5 * (a + b)) + at(b))
            })
        })
        .collect();
    Estimate::from_values(&values)
}

/// `u_i(t₀+h, x) - E_i[u_{ω(h)}(t₀, x + h q)] <= E_i[∫_0^h L_{ω(s)}(x + s q, -q) ds]`
/// at random straight curves, with the left expectation taken exactly.
pub fn check_suboptimality(
    problem: &ProblemInstance,
    field: &GridField,
    budget: &Budget,
) -> Result<CheckReport, VerifyError> {
    let horizon = problem.horizon();
    let reach = 0.4 * problem.half_width();
    let dim = problem.dim();
    let mut worst = f64::NEG_INFINITY;
    let mut witness = String::new();
    for k in 0..budget.curve_samples {
        let mut rng = path_rng(budget.stream(3), k as u64);
        let h = rng.random_range(0.1..0.5) * horizon;
        let t0 = rng.random_range(0.0..horizon - h);
        let i = rng.random_range(0..problem.m());
        let mut x = [0.0; 2];
        let mut q = [0.0; 2];
        for a in 0..dim {
            x[a] = rng.random_range(-reach..reach);
            q[a] = rng.random_range(-0.5..0.5) * problem.q_max() / (dim as f64).sqrt();
        }
        let end = [x[0] + h * q[0], x[1] + h * q[1]];
        let later = field.evaluate(t0 + h, x, i)?;
        let earlier = field.evaluate_all(t0, end)?;
        let pushed = problem.coupling().transition_matrix(h)?.apply_row(i, &earlier);
        let ensemble = PathEnsemble::sample(problem.coupling(), i, h, budget.action_paths, budget.stream(3) + k as u64);
        let action = straight_action(problem, &ensemble, x, q);
        let excess = later - pushed - action.mean - 3.0 * action.std_error;
        if excess > worst {
            worst = excess;
            witness = format!("{} h={h:.4} q={:.4}", describe(field.grid(), t0, x, i), q[0]);
        }
    }
    let tolerance = scheme_tolerance(problem, &budget.resolution);
    Ok(CheckReport::at_most("suboptimality", worst, tolerance, budget, witness))
}

/// Finite-difference quotient of `E_i[u_{ω(h)}(h, γ(h))]` against
/// `-(Bu)_i + ∂_t u_i + <D u_i, γ'>` for `u = (±x₁)`, `γ(t) = x₀ + t e₁`.
/// Passes when the residual decays at average order 0.9 or better over three
/// halvings of `h`.
pub fn check_derivative_formula(problem: &ProblemInstance, budget: &Budget) -> Result<CheckReport, VerifyError> {
    let m = problem.m();
    let grid = problem.grid(budget.resolution.dx)?;
    let sign = |j: usize| if j.is_multiple_of(2) { 1.0 } else { -1.0 };
    let times: Vec<f64> = (0..=10).map(|k| 0.05 * k as f64).collect();
    let field = GridField::from_fn(grid.clone(), times, m, 1.0, |_, x| (0..m).map(|j| sign(j) * x[0]).collect());
    let start = [0.3, 0.0];
    let i = 0;
    let b = problem.coupling();
    let u0 = field.evaluate_all(0.0, start)?;
    let dt_u = (field.evaluate(0.05, start, i)? - u0[i]) / 0.05;
    let right = -b.apply_row(i, &u0) + dt_u + field.gradient(0.0, start, i)[0];
    let steps = [0.05, 0.025, 0.0125, 0.00625];
    let mut residuals = Vec::new();
    for &h in &steps {
        let later = field.evaluate_all(h, [start[0] + h, start[1]])?;
        let expected = b.transition_matrix(h)?.apply_row(i, &later);
        residuals.push(((expected - u0[i]) / h - right).abs());
    }
    let first = residuals[0];
    let last = *residuals.last().expect("nonempty");
    let tolerance = first * (steps[3] / steps[0]).powf(0.9) + 1e-12;
    let orders: Vec<String> = residuals.windows(2).map(|w| format!("{:.3}", (w[0] / w[1]).log2())).collect();
    Ok(CheckReport::at_most(
        "derivative_formula",
        last,
        tolerance,
        budget,
        format!("{} residuals {:?} orders [{}]", describe(&grid, 0.0, start, i), residuals, orders.join(", ")),
    ))
}

/// Worst standardized deviation over state laws, shifted cylinders and the
/// mismatch bound, for ensembles of `n` paths.
fn chain_deviation(problem: &ProblemInstance, n: usize, seed: u64) -> Result<(f64, String), VerifyError> {
    let b = problem.coupling();
    let m = problem.m();
    let horizon = problem.horizon();
    let lipschitz = (m * m) as f64 * b.max_abs_entry();
    let sigma = |p: f64| binomial_sigma(p, n).max(1.0 / n as f64);
    let mut worst = f64::NEG_INFINITY;
    let mut witness = String::new();
    let mut note = |z: f64, what: String| {
        if z > worst {
            worst = z;
            witness = what;
        }
    };
    for i in 0..m {
        let ensemble = PathEnsemble::sample(b, i, horizon, n, seed.wrapping_add(i as u64));
        for t in [0.25 * horizon, 0.5 * horizon, horizon] {
            let law = ensemble.state_law(t, m)?;
            let exact = b.transition_matrix(t)?;
            for (j, p) in law.iter().enumerate() {
                let e = exact.entry(i, j);
                note((p - e).abs() / sigma(e), format!("law from {i} at t={t}, state {j}: {p:.5} vs {e:.5}"));
            }
        }
        // Shifted paths from i are distributed as the P(h)-mixture of paths
        // started afresh; compared on two-time cylinders.
        let shift = 0.25 * horizon;
        let (t1, t2) = (0.2 * horizon, 0.6 * horizon);
        let (p_shift, p1, p21) = (b.transition_matrix(shift)?, b.transition_matrix(t1)?, b.transition_matrix(t2 - t1)?);
        for s1 in 0..m {
            for s2 in 0..m {
                let mut hits = 0usize;
                for path in ensemble.paths() {
                    let shifted = path.shift(shift)?;
                    if shifted.state_at(t1)? == s1 && shifted.state_at(t2)? == s2 {
                        hits += 1;
                    }
                }
                let freq = hits as f64 / n as f64;
                let exact: f64 = (0..m).map(|k| p_shift.entry(i, k) * p1.entry(k, s1)).sum::<f64>() * p21.entry(s1, s2);
                note(
                    (freq - exact).abs() / sigma(exact),
                    format!("shifted cylinder from {i}, states ({s1}, {s2}): {freq:.5} vs {exact:.5}"),
                );
            }
        }
        for (a, c) in [(0.1, 0.15), (0.3, 0.5), (0.0, 1.0)] {
            let (a, c) = (a * horizon, c * horizon);
            let freq = ensemble.mismatch_probability(a, c)?;
            let bound = lipschitz * (c - a);
            note(
                (freq - bound) / sigma(bound.min(1.0)),
                format!("mismatch from {i} on [{a}, {c}]: {freq:.5} vs bound {bound:.5}"),
            );
        }
    }
    Ok((worst, witness))
}

/// Empirical chain statistics within three standard deviations; a failure is
/// retried once with four times the samples.
pub fn check_markov_statistics(problem: &ProblemInstance, budget: &Budget) -> Result<CheckReport, VerifyError> {
    let seed = budget.stream(4);
    let (mut worst, mut witness) = chain_deviation(problem, budget.chain_paths, seed)?;
    if worst > 3.0 {
        let (w, note) = chain_deviation(problem, 4 * budget.chain_paths, seed.wrapping_add(1 << 32))?;
        witness = format!("retried with {} paths after {worst:.3}σ; {note}", 4 * budget.chain_paths);
        worst = w;
    }
    Ok(CheckReport::at_most("markov_statistics", worst, 3.0, budget, witness))
}

/// Most negative slack of the a-priori bounds over the field.
pub fn check_apriori_bounds(
    problem: &ProblemInstance,
    field: &GridField,
    budget: &Budget,
) -> Result<CheckReport, VerifyError> {
    let tolerance = scheme_tolerance(problem, &budget.resolution);
    let r = apriori_bounds_check_with(field, problem, f64::INFINITY)?;
    let (slack, (t, x, i)) =
        if r.lower_slack < r.upper_slack { (r.lower_slack, r.lower_witness) } else { (r.upper_slack, r.upper_witness) };
    Ok(CheckReport::at_most("apriori_bounds", 0.0 - slack, tolerance, budget, describe(field.grid(), t, x, i)))
}

/// Worst `u(t, x+z) + u(t, x-z) - 2u(t, x) - 2C(t/3 + 1/t)|z|²` at
/// `t ∈ {T/4, T/2, T}` over nodes in the inner three quarters of the box
/// and axis offsets `|z| <= 0.5`, with `C` the sampled semiconcavity
/// constant of the Lagrangians.
pub fn semiconcavity_excess(problem: &ProblemInstance, field: &GridField) -> (f64, f64, String) {
    let c = problem.lagrangians().semiconcavity_constant(problem.half_width(), problem.q_max());
    let grid = field.grid();
    let dx = grid.dx();
    let side = grid.nodes_per_axis();
    let inner = 0.75 * problem.half_width();
    let reach = (0.5 / dx).floor() as usize;
    let mut worst = f64::NEG_INFINITY;
    let mut witness = String::new();
    for t in [0.25, 0.5, 1.0].map(|f| f * problem.horizon()) {
        let Some(level) = field.level_of(t) else { continue };
        let t = field.times()[level];
        let factor = 2.0 * c * (t / 3.0 + 1.0 / t);
        for k in 0..grid.len() {
            let x = grid.node(k);
            if x[0].abs() > inner || x[1].abs() > inner {
                continue;
            }
            let (ix, iy) = grid.axes(k);
            for axis in 0..grid.dim() {
                let pos = if axis == 0 { ix } else { iy };
                for z in 1..=reach.min(pos).min(side - 1 - pos) {
                    let o = if axis == 0 { [z as i64, 0] } else { [0, z as i64] };
                    let (Some(up), Some(down)) = (grid.offset(k, o), grid.offset(k, [-o[0], -o[1]])) else {
                        continue;
                    };
                    let zz = z as f64 * dx;
                    for i in 0..field.m() {
                        let second = field.node_value(level, up, i) + field.node_value(level, down, i)
                            - 2.0 * field.node_value(level, k, i);
                        let excess = second - factor * zz * zz;
                        if excess > worst {
                            worst = excess;
                            witness = format!("{} z={zz:.4}", describe(grid, t, x, i));
                        }
                    }
                }
            }
        }
    }
    (worst, c, witness)
}

pub fn check_semiconcavity(problem: &ProblemInstance, field: &GridField, budget: &Budget) -> CheckReport {
    let (worst, c, witness) = semiconcavity_excess(problem, field);
    let tolerance = scheme_tolerance(problem, &budget.resolution);
    CheckReport::at_most("semiconcavity", worst, tolerance, budget, format!("C={c:.4} {witness}"))
}

/// Start points at fixed fractions of the half-width along the first axis.
pub fn probe_points(problem: &ProblemInstance) -> Vec<Point> {
    let w = problem.half_width();
    [-0.1875, -0.075, 0.0, 0.1, 0.1875].iter().map(|f| [f * w, 0.0]).collect()
}

/// Monte Carlo action of the constructed minimizers and the path-wise
/// relaxation at the probe points, for every initial index.
struct ActionStudy {
    rows: Vec<(usize, Point, f64, Estimate, Estimate)>,
}

fn action_study(problem: &ProblemInstance, field: &GridField, budget: &Budget) -> Result<ActionStudy, VerifyError> {
    let ctx = MinimizerContext::new(problem, field, budget.resolution.dt)?;
    let mut rows = Vec::new();
    for i in 0..problem.m() {
        let ensemble = PathEnsemble::sample(
            problem.coupling(),
            i,
            problem.horizon(),
            budget.action_paths,
            budget.stream(5) + i as u64,
        );
        for x in probe_points(problem) {
            let value = field.evaluate(problem.horizon(), x, i)?;
            let action = expected_action(&ctx, &ensemble, x, i)?;
            let relaxed = relaxation_lower_bound(problem, &ensemble, x, i, &budget.resolution)?;
            rows.push((i, x, value, action, relaxed));
        }
    }
    Ok(ActionStudy { rows })
}

/// `|E_i[action] - u_i(T, x)| <= 3·se + 5(Δx + Δt)` at the probe points.
fn butterfly_report(problem: &ProblemInstance, study: &ActionStudy, budget: &Budget) -> CheckReport {
    let r = budget.resolution;
    let mut worst = f64::NEG_INFINITY;
    let mut witness = String::new();
    for (i, x, value, action, _) in &study.rows {
        let excess = (action.mean - value).abs() - 3.0 * action.std_error;
        if excess > worst {
            worst = excess;
            witness = format!("{} mean={:.6} u={value:.6}", describe_x(problem, *x, *i), action.mean);
        }
    }
    CheckReport::at_most("expected_action", worst, 5.0 * (r.dx + r.dt), budget, witness)
}

/// `E_i[relaxed value] <= u_i(T, x) + 3·se + 5(Δx + Δt)` at the probe points.
fn relaxation_report(problem: &ProblemInstance, study: &ActionStudy, budget: &Budget) -> CheckReport {
    let r = budget.resolution;
    let mut worst = f64::NEG_INFINITY;
    let mut witness = String::new();
    for (i, x, value, _, relaxed) in &study.rows {
        let excess = relaxed.mean - value - 3.0 * relaxed.std_error;
        if excess > worst {
            worst = excess;
            witness = format!("{} relaxed={:.6} u={value:.6}", describe_x(problem, *x, *i), relaxed.mean);
        }
    }
    CheckReport::at_most("relaxation_order", worst, 5.0 * (r.dx + r.dt), budget, witness)
}

fn describe_x(problem: &ProblemInstance, x: Point, i: usize) -> String {
    if problem.dim() == 1 {
        format!("x={:.4} i={i}", x[0])
    } else {
        format!("x=({:.4}, {:.4}) i={i}", x[0], x[1])
    }
}

/// Largest calibration residual over minimizers from spread start points.
pub fn calibration_study(
    problem: &ProblemInstance,
    field: &GridField,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<(f64, String), VerifyError> {
    let ctx = MinimizerContext::new(problem, field, dt)?;
    let ensemble = PathEnsemble::sample(problem.coupling(), 0, problem.horizon(), paths, seed);
    let span = 0.1875 * problem.half_width();
    let residuals = ensemble
        .paths()
        .par_iter()
        .enumerate()
        .map(|(k, path)| {
            let f = if paths > 1 { k as f64 / (paths - 1) as f64 } else { 0.5 };
            let x = [-span + 2.0 * span * f, 0.0];
            let sample = construct_minimizer(&ctx, path, x)?;
            Ok((per_interval_calibration(&sample, field, problem), x))
        })
        .collect::<Result<Vec<_>, MinimizerError>>()?;
    let (worst, x) = residuals.iter().fold((0.0f64, [0.0; 2]), |acc, &(r, x)| if r > acc.0 { (r, x) } else { acc });
    Ok((worst, describe_x(problem, x, 0)))
}

pub fn check_calibration(
    problem: &ProblemInstance,
    field: &GridField,
    budget: &Budget,
) -> Result<CheckReport, VerifyError> {
    let r = budget.resolution;
    let (worst, witness) = calibration_study(problem, field, r.dt, budget.calibration_paths, budget.stream(6))?;
    Ok(CheckReport::at_most("calibration", worst, 5.0 * scheme_tolerance(problem, &r), budget, witness))
}

/// Every check at the budget's resolution and sample sizes, sorted by name.
/// The result depends only on the problem and the budget.
pub fn run_all(problem: &ProblemInstance, budget: &Budget) -> Result<Vec<CheckReport>, VerifyError> {
    let field = solve_semilagrangian(problem, &budget.resolution)?;
    type Check<'a> = Box<dyn Fn() -> Result<Vec<CheckReport>, VerifyError> + Send + Sync + 'a>;
    let field = &field;
    let checks: Vec<Check> = vec![
        Box::new(|| Ok(vec![check_nonexpansive(problem, budget)?])),
        Box::new(|| Ok(vec![check_comparison(problem, budget)?])),
        Box::new(|| Ok(vec![check_semigroup(problem, budget)?])),
        Box::new(|| Ok(vec![check_suboptimality(problem, field, budget)?])),
        Box::new(|| Ok(vec![check_derivative_formula(problem, budget)?])),
        Box::new(|| Ok(vec![check_markov_statistics(problem, budget)?])),
        Box::new(|| Ok(vec![check_apriori_bounds(problem, field, budget)?])),
        Box::new(|| Ok(vec![check_semiconcavity(problem, field, budget)])),
        Box::new(|| Ok(vec![check_calibration(problem, field, budget)?])),
        Box::new(|| {
            let study = action_study(problem, field, budget)?;
            Ok(vec![butterfly_report(problem, &study, budget), relaxation_report(problem, &study, budget)])
        }),
    ];
    let results: Vec<Result<Vec<CheckReport>, VerifyError>> = checks.par_iter().map(|c| c()).collect();
    let mut reports = Vec::new();
    for r in results {
        reports.extend(r?);
    }
    reports.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(reports)
}

/// Fixed-width table of the reports.
pub fn render_table(reports: &[CheckReport]) -> String {
    let mut out = format!("{:<20} {:<6} {:>13} {:>13} {:>13}\n", "check", "status", "measured", "tolerance", "margin");
    for r in reports {
        out.push_str(&format!(
            "{:<20} {:<6} {:>13.5e} {:>13.5e} {:>13.5e}\n",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.measured,
            r.tolerance,
            r.margin
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::test_problems::reference;

    #[test]
    fn derivative_formula_on_reference_coupling() {
        let p = reference();
        let r = check_derivative_formula(&p, &Budget::small(1)).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.witness.unwrap().contains("orders"));
    }

    #[test]
    fn derivative_formula_exact_without_coupling() {
        let p = reference().with_coupling(crate::coupling::CouplingMatrix::zero(2)).unwrap();
        let r = check_derivative_formula(&p, &Budget::small(1)).unwrap();
        assert!(r.passed && r.measured < 1e-9, "{r:?}");
    }

    #[test]
    fn contraction_and_ordering_hold() {
        let p = reference();
        let b = Budget::small(3);
        assert!(check_nonexpansive(&p, &b).unwrap().passed);
        assert!(check_comparison(&p, &b).unwrap().passed);
    }

    #[test]
    fn reversed_coupling_breaks_ordering_with_witness() {
        let p = reference();
        let r = check_comparison(&p, &Budget::small(3).with_reversed_coupling(true)).unwrap();
        assert!(!r.passed);
        assert!(r.witness.is_some_and(|w| w.contains("t=")));
    }

    #[test]
    fn chain_statistics_pass() {
        let r = check_markov_statistics(&reference(), &Budget::small(9)).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn budget_names_parse() {
        assert_eq!("small".parse::<BudgetKind>().unwrap(), BudgetKind::Small);
        assert!("huge".parse::<BudgetKind>().is_err());
    }
}
