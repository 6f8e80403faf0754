//! Minimizing random curves built segment by segment along an index path,
//! Monte Carlo evaluation of their action, and adjoint diagnostics.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{norm, sub, Point, SpatialGrid};
use crate::markov::{IndexPath, MarkovError, PathEnsemble};
use crate::models::{hamiltonian_gradients, ModelError};
use crate::path_opt::{
    calibration_between, extract_with_source, MinimizingCurve, PathError, RunningCost, SegmentProblem, StepSource,
    ValueTable,
};
use crate::pde::{GridField, NodeLagrangian, ProblemInstance, Resolution, SolverError};

#[derive(Debug, Error)]
pub enum MinimizerError {
    #[error("curve left the spatial box at t = {t}, x = {x:?}; enlarge the half-width")]
    OutOfDomain { t: f64, x: Point },
    #[error("segment {segment} failed: {source}")]
    SegmentFailure {
        segment: usize,
        #[source]
        source: PathError,
    },
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{0}")]
    Invalid(String),
}

fn segment_error(segment: usize, e: PathError) -> MinimizerError {
    match e {
        PathError::OutOfDomain { t, x } => MinimizerError::OutOfDomain { t, x },
        source => MinimizerError::SegmentFailure { segment, source },
    }
}

/// Solved field, problem and one effective-Lagrangian value table per
/// frozen index, built on first use and shared between paths.
pub struct MinimizerContext<'a> {
    problem: &'a ProblemInstance,
    field: &'a GridField,
    resolution: Resolution,
    tables: Vec<OnceLock<Arc<ValueTable>>>,
}

impl<'a> MinimizerContext<'a> {
    /// Segment tables use the field's spacing and the time step `dt`.
    pub fn new(problem: &'a ProblemInstance, field: &'a GridField, dt: f64) -> Result<Self, MinimizerError> {
        if field.m() != problem.m() || field.grid().dim() != problem.dim() {
            return Err(MinimizerError::Invalid("field does not match the problem".into()));
        }
        let resolution = Resolution::new(field.grid().dx(), dt);
        let tables = (0..problem.m()).map(|_| OnceLock::new()).collect();
        Ok(Self { problem, field, resolution, tables })
    }

    pub fn problem(&self) -> &ProblemInstance {
        self.problem
    }

    pub fn field(&self) -> &GridField {
        self.field
    }

    pub fn resolution(&self) -> &Resolution {
        &self.resolution
    }

    /// Table for frozen index `j`; concurrent first calls may both build it,
    /// and either result is kept since they are identical.
    pub fn table(&self, j: usize) -> Result<Arc<ValueTable>, PathError> {
        let cell = self.tables.get(j).ok_or_else(|| PathError::Invalid(format!("index {j} out of range")))?;
        if let Some(t) = cell.get() {
            return Ok(t.clone());
        }
        let built = ValueTable::build(self.problem, j, j, RunningCost::Effective(self.field), &self.resolution)?;
        let _ = cell.set(Arc::new(built));
        Ok(cell.get().expect("just set").clone())
    }
}

/// One path, its concatenated curve and the bookkeeping of its segments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomCurveSample {
    pub path: IndexPath,
    /// Increments use the original Lagrangian of the active index.
    pub curve: MinimizingCurve,
    /// Start times `τ_k` of the segments (`τ_0 = 0`).
    pub segment_starts: Vec<f64>,
    /// Start points `x_k`.
    pub segment_points: Vec<Point>,
    /// Frozen index of each segment.
    pub frozen: Vec<usize>,
    /// `u⁰_{ω(T)}(η(T)) + ∫_0^T L_{ω(s)}(η, -η̇) ds`.
    pub action: f64,
}

impl RandomCurveSample {
    /// Sample-index range `[first, last]` of segment `k` in the curve.
    pub fn segment_range(&self, k: usize) -> (usize, usize) {
        let first = self.curve.sources.iter().position(|s| s.segment == k);
        let last = self.curve.sources.iter().rposition(|s| s.segment == k);
        match (first, last) {
            (Some(a), Some(b)) => (a, b + 1),
            _ => {
                let at = self.curve.times.partition_point(|&t| t < self.segment_starts[k]);
                let at = at.min(self.curve.times.len() - 1);
                (at, at)
            }
        }
    }
}

/// Follows segment `k` of the frozen-index minimizers from `(τ_k, x_k)` up to
/// `τ_{k+1}`, then restarts with the new index.
pub fn construct_minimizer(
    ctx: &MinimizerContext<'_>,
    path: &IndexPath,
    start: Point,
) -> Result<RandomCurveSample, MinimizerError> {
    let problem = ctx.problem;
    let horizon = problem.horizon();
    if (path.horizon() - horizon).abs() > 1e-12 * (1.0 + horizon) {
        return Err(MinimizerError::Invalid(format!("path horizon {} differs from {horizon}", path.horizon())));
    }
    let mut curve = MinimizingCurve {
        dim: problem.dim(),
        times: vec![0.0],
        positions: vec![start],
        velocities: Vec::new(),
        increments: Vec::new(),
        sources: Vec::new(),
        terminal_cost: 0.0,
        total: 0.0,
    };
    let mut sample = RandomCurveSample {
        path: path.clone(),
        curve: curve.clone(),
        segment_starts: Vec::new(),
        segment_points: Vec::new(),
        frozen: Vec::new(),
        action: 0.0,
    };
    let mut point = start;
    for (k, iv) in path.intervals().iter().enumerate() {
        let j = iv.state;
        sample.segment_starts.push(iv.start);
        sample.segment_points.push(point);
        sample.frozen.push(j);
        let table = ctx.table(j).map_err(|e| segment_error(k, e))?;
        let seg = SegmentProblem::new(j, iv.start, point, RunningCost::Effective(ctx.field));
        let piece = extract_with_source(&table, problem, &seg, StepSource { segment: k, index: j }, iv.end)
            .map_err(|e| segment_error(k, e))?;
        for s in 0..piece.steps() {
            let t0 = piece.times[s];
            if t0 >= iv.end {
                break;
            }
            let v = piece.velocities[s];
            let t_next = piece.times[s + 1];
            let (t1, p1) = if (t_next - iv.end).abs() <= 1e-13 * (1.0 + horizon) {
                (iv.end, piece.positions[s + 1])
            } else if t_next > iv.end {
                let dt = iv.end - t0;
                let p0 = piece.positions[s];
                (iv.end, [p0[0] + v[0] * dt, p0[1] + v[1] * dt])
            } else {
                (t_next, piece.positions[s + 1])
            };
            curve.times.push(t1);
            curve.positions.push(p1);
            curve.velocities.push(v);
            curve.sources.push(piece.sources[s]);
            point = p1;
        }
    }
    // Original-Lagrangian action with trapezoid steps.
    for s in 0..curve.steps() {
        let l = problem.lagrangian(curve.sources[s].index);
        let q = [-curve.velocities[s][0], -curve.velocities[s][1]];
        let dt = curve.times[s + 1] - curve.times[s];
        curve.increments.push(0.5 * dt * (l.value(curve.positions[s], q) + l.value(curve.positions[s + 1], q)));
    }
    curve.terminal_cost = problem.initial_value(path.final_state(), curve.end_position());
    curve.total = curve.increments.iter().sum::<f64>() + curve.terminal_cost;
    sample.action = curve.total;
    sample.curve = curve;
    Ok(sample)
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    /// Mean and standard error of `values`, summed in order.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        // Deviations from the first value keep identical samples exactly at zero spread.
        let pivot = values.first().copied().unwrap_or(0.0);
        let shift = values.iter().map(|v| v - pivot).sum::<f64>() / n as f64;
        let var =
            if n > 1 { values.iter().map(|v| (v - pivot - shift).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean: pivot + shift, std_error: (var / n as f64).sqrt(), samples: n }
    }
}

fn check_ensemble(problem: &ProblemInstance, ensemble: &PathEnsemble, i: usize) -> Result<(), MinimizerError> {
    if ensemble.is_empty() {
        return Err(MarkovError::EmptyEnsemble.into());
    }
    if ensemble.initial_state() != i {
        return Err(MinimizerError::Invalid(format!(
            "ensemble starts in state {}, expected {i}",
            ensemble.initial_state()
        )));
    }
    if (ensemble.horizon() - problem.horizon()).abs() > 1e-12 * (1.0 + problem.horizon()) {
        return Err(MinimizerError::Invalid("ensemble horizon differs from the problem".into()));
    }
    Ok(())
}

/// Monte Carlo estimate of the original-Lagrangian action of the
/// constructed curves from `x`.
pub fn expected_action(
    ctx: &MinimizerContext<'_>,
    ensemble: &PathEnsemble,
    x: Point,
    i: usize,
) -> Result<Estimate, MinimizerError> {
    check_ensemble(ctx.problem, ensemble, i)?;
    let actions: Vec<f64> = ensemble
        .paths()
        .par_iter()
        .map(|p| construct_minimizer(ctx, p, x).map(|s| s.action))
        .collect::<Result<_, _>>()?;
    Ok(Estimate::from_values(&actions))
}

/// Action of the constant curve `γ ≡ x` along every path.
pub fn constant_curve_action(
    problem: &ProblemInstance,
    ensemble: &PathEnsemble,
    x: Point,
    i: usize,
) -> Result<Estimate, MinimizerError> {
    check_ensemble(problem, ensemble, i)?;
    let values: Vec<f64> = ensemble
        .paths()
        .iter()
        .map(|p| {
            let running = p
                .integrate_pieces(0.0, problem.horizon(), |s, a, b| (b - a) * problem.lagrangian(s).value(x, [0.0; 2]));
            problem.initial_value(p.final_state(), x) + running
        })
        .collect();
    Ok(Estimate::from_values(&values))
}

/// Exact expectation of [`constant_curve_action`]:
/// `(e^{-TB} u⁰(x))_i + ∫_0^T (e^{-sB} ℓ)_i ds` with `ℓ_k = L_k(x, 0)`.
pub fn constant_curve_exact(problem: &ProblemInstance, x: Point, i: usize) -> Result<f64, MinimizerError> {
    let b = problem.coupling();
    let horizon = problem.horizon();
    let to_err = |e: crate::coupling::CouplingError| MinimizerError::Invalid(e.to_string());
    let terminal = b.push_vector(horizon, &problem.initial_vector(x)).map_err(to_err)?[i];
    let rest: Vec<f64> = (0..problem.m()).map(|k| problem.lagrangian(k).value(x, [0.0; 2])).collect();
    // Composite Simpson; the integrand is a finite sum of exponentials.
    let n = 200;
    let h = horizon / n as f64;
    let mut integral = 0.0;
    for k in 0..=n {
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        integral += w * b.push_vector(k as f64 * h, &rest).map_err(to_err)?[i];
    }
    Ok(terminal + integral * h / 3.0)
}

/// Uniform step grid of `[0, T]` with the constancy pieces of a path inside
/// each step.
struct StepPlan {
    levels: usize,
    step: f64,
    horizon: f64,
    pieces: Vec<Vec<(f64, f64, usize)>>,
}

impl StepPlan {
    fn new(path: &IndexPath, horizon: f64, dt: f64) -> Self {
        let levels = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
        let step = horizon / levels as f64;
        let mut plan = Self { levels, step, horizon, pieces: Vec::with_capacity(levels) };
        for level in 0..levels {
            let mut out = Vec::new();
            path.integrate_pieces(plan.time(level), plan.time(level + 1), |s, s0, s1| {
                out.push((s0, s1, s));
                0.0
            });
            plan.pieces.push(out);
        }
        plan
    }

    fn time(&self, level: usize) -> f64 {
        if level == self.levels {
            self.horizon
        } else {
            level as f64 * self.step
        }
    }

    /// Weights `(α_s, β_s)` such that the potential part of a step's
    /// trapezoid cost is `Σ_s α_s P_s(start) + β_s P_s(end)` once the
    /// potential at interior points is interpolated linearly between the ends.
    fn potential_weights(&self, level: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
        let t0 = self.time(level);
        let (mut alpha, mut beta) = (vec![0.0; m], vec![0.0; m]);
        for &(a, b, s) in &self.pieces[level] {
            let (la, lb) = ((a - t0) / self.step, (b - t0) / self.step);
            alpha[s] += 0.5 * (b - a) * ((1.0 - la) + (1.0 - lb));
            beta[s] += 0.5 * (b - a) * (la + lb);
        }
        (alpha, beta)
    }
}

/// `out[k] = min_j c·(k - j)² + f[j]` by the lower envelope of parabolas.
fn distance_transform(f: &[f64], c: f64, out: &mut [f64], hull: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    let n = f.len();
    hull.clear();
    bounds.clear();
    let key = |j: usize| f[j] + c * (j * j) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut cut = f64::NEG_INFINITY;
        while let Some(&top) = hull.last() {
            let s = (key(q) - key(top)) / (2.0 * c * (q - top) as f64);
            if s <= *bounds.last().expect("paired with hull") {
                hull.pop();
                bounds.pop();
            } else {
                cut = s;
                break;
            }
        }
        hull.push(q);
        bounds.push(cut);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        if hull.is_empty() {
            *o = f64::INFINITY;
            continue;
        }
        while k + 1 < hull.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - hull[k] as f64;
        *o = c * d * d + f[hull[k]];
    }
}

/// Per-path minimum of `u⁰_{ω(T)}(ξ(T)) + ∫_0^T L_{ω(s)}(ξ, -ξ̇) ds` over
/// lattice curves from `x`. The path is known in advance, so this relaxes
/// nonanticipation and its mean bounds the value from below.
///
/// For the quadratic family each backward step is a quadratic distance
/// transform over all nodes (no velocity truncation, which only lowers the
/// value); other families use a direct search over the velocity lattice.
pub fn switching_value(
    problem: &ProblemInstance,
    path: &IndexPath,
    x: Point,
    resolution: &Resolution,
) -> Result<f64, MinimizerError> {
    let grid = problem.grid(resolution.dx)?;
    if !grid.contains(x) {
        return Err(MinimizerError::OutOfDomain { t: 0.0, x });
    }
    let plan = StepPlan::new(path, problem.horizon(), resolution.dt);
    if problem.lagrangians().is_quadratic() {
        Ok(switching_quadratic(problem, path, x, &grid, &plan))
    } else {
        Ok(switching_direct(problem, path, x, &grid, &plan))
    }
}

fn switching_quadratic(
    problem: &ProblemInstance,
    path: &IndexPath,
    x: Point,
    grid: &SpatialGrid,
    plan: &StepPlan,
) -> f64 {
    let m = problem.m();
    let n = grid.len();
    let side = grid.nodes_per_axis();
    let potentials: Vec<Vec<f64>> = (0..m)
        .map(|s| {
            let v = problem.lagrangian(s).potential().expect("quadratic member");
            (0..n).map(|k| -v.value(grid.node(k))).collect()
        })
        .collect();
    let c = grid.dx() * grid.dx() / (2.0 * plan.step);
    let terminal = path.final_state();
    let mut next: Vec<f64> = (0..n).map(|k| problem.initial_value(terminal, grid.node(k))).collect();
    let mut shifted = vec![0.0; n];
    let mut line_in = vec![0.0; side];
    let mut line_out = vec![0.0; side];
    let (mut hull, mut bounds) = (Vec::new(), Vec::new());
    for level in (1..plan.levels).rev() {
        let (alpha, beta) = plan.potential_weights(level, m);
        for (k, s) in shifted.iter_mut().enumerate() {
            *s = next[k] + (0..m).map(|j| beta[j] * potentials[j][k]).sum::<f64>();
        }
        if grid.dim() == 1 {
            distance_transform(&shifted, c, &mut next, &mut hull, &mut bounds);
        } else {
            // Rows then columns; node index is `iy·side + ix`.
            for iy in 0..side {
                let row = iy * side..(iy + 1) * side;
                distance_transform(&shifted[row.clone()], c, &mut line_out, &mut hull, &mut bounds);
                shifted[row].copy_from_slice(&line_out);
            }
            for ix in 0..side {
                for iy in 0..side {
                    line_in[iy] = shifted[iy * side + ix];
                }
                distance_transform(&line_in, c, &mut line_out, &mut hull, &mut bounds);
                for iy in 0..side {
                    next[iy * side + ix] = line_out[iy];
                }
            }
        }
        for (k, w) in next.iter_mut().enumerate() {
            *w += (0..m).map(|j| alpha[j] * potentials[j][k]).sum::<f64>();
        }
    }
    let (alpha, beta) = plan.potential_weights(0, m);
    let start: f64 = (0..m).map(|j| alpha[j] * -problem.lagrangian(j).potential().expect("quadratic").value(x)).sum();
    (0..n)
        .map(|k| {
            let d = sub(grid.node(k), x);
            let end: f64 = (0..m).map(|j| beta[j] * potentials[j][k]).sum();
            (d[0] * d[0] + d[1] * d[1]) / (2.0 * plan.step) + start + end + next[k]
        })
        .fold(f64::INFINITY, f64::min)
}

fn switching_direct(problem: &ProblemInstance, path: &IndexPath, x: Point, grid: &SpatialGrid, plan: &StepPlan) -> f64 {
    let q_max = problem.q_max();
    let dx = grid.dx();
    let step = plan.step;
    let lag = NodeLagrangian::new(grid, problem.lagrangians());
    let n = grid.len();
    // Trapezoid cost of moving from `from` (a node or the start) to node `to`.
    let step_cost = |level: usize, from: Option<usize>, p0: Point, to: usize| -> f64 {
        let p1 = grid.node(to);
        let v = [(p1[0] - p0[0]) / step, (p1[1] - p0[1]) / step];
        let q = [-v[0], -v[1]];
        let t0 = plan.time(level);
        let parts = &plan.pieces[level];
        if parts.len() == 1 {
            let s = parts[0].2;
            let c0 = match from {
                Some(k) => lag.at_node(s, k, q),
                None => lag.at_point(s, p0, q),
            };
            return 0.5 * step * (c0 + lag.at_node(s, to, q));
        }
        parts
            .iter()
            .map(|&(a, b, s)| {
                let pa = [p0[0] + v[0] * (a - t0), p0[1] + v[1] * (a - t0)];
                let pb = [p0[0] + v[0] * (b - t0), p0[1] + v[1] * (b - t0)];
                0.5 * (b - a) * (lag.at_point(s, pa, q) + lag.at_point(s, pb, q))
            })
            .sum()
    };
    let reach = q_max * step;
    let offsets = grid.offsets_within(reach);
    let in_cone = |level: usize, k: usize| {
        let p = grid.node(k);
        let r = q_max * plan.time(level) + dx;
        (p[0] - x[0]).abs() <= r && (p[1] - x[1]).abs() <= r
    };
    let terminal = path.final_state();
    let mut next: Vec<f64> = (0..n)
        .map(|k| if in_cone(plan.levels, k) { problem.initial_value(terminal, grid.node(k)) } else { f64::INFINITY })
        .collect();
    for level in (1..plan.levels).rev() {
        let current: Vec<f64> = (0..n)
            .map(|k| {
                if !in_cone(level, k) {
                    return f64::INFINITY;
                }
                let p0 = grid.node(k);
                let mut best = f64::INFINITY;
                for o in &offsets {
                    let Some(to) = grid.offset(k, *o) else { continue };
                    if next[to].is_finite() {
                        best = best.min(step_cost(level, Some(k), p0, to) + next[to]);
                    }
                }
                best
            })
            .collect();
        next = current;
    }
    let from = grid.node_at(x);
    let targets: Vec<usize> = match from {
        Some(k) => offsets.iter().filter_map(|o| grid.offset(k, *o)).collect(),
        None => {
            let center = grid.nearest(x);
            let r = (reach / dx).ceil() as i64 + 1;
            let ry = if grid.dim() == 2 { r } else { 0 };
            (-r..=r)
                .flat_map(|ox| (-ry..=ry).map(move |oy| [ox, oy]))
                .filter_map(|o| grid.offset(center, o))
                .filter(|&to| norm(sub(grid.node(to), x)) <= reach * (1.0 + 1e-12))
                .collect()
        }
    };
    targets
        .into_iter()
        .filter(|&to| next[to].is_finite())
        .map(|to| step_cost(0, from, x, to) + next[to])
        .fold(f64::INFINITY, f64::min)
}

/// Mean of [`switching_value`] over the ensemble.
pub fn relaxation_lower_bound(
    problem: &ProblemInstance,
    ensemble: &PathEnsemble,
    x: Point,
    i: usize,
    resolution: &Resolution,
) -> Result<Estimate, MinimizerError> {
    check_ensemble(problem, ensemble, i)?;
    let values: Vec<f64> =
        ensemble.paths().par_iter().map(|p| switching_value(problem, p, x, resolution)).collect::<Result<_, _>>()?;
    Ok(Estimate::from_values(&values))
}

/// `P = ∂_q L_{ω}(η, -η̇)` per curve step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointCurve {
    /// Step start times.
    pub times: Vec<f64>,
    pub values: Vec<Point>,
    pub states: Vec<usize>,
    /// Whether the step starts a new segment (a jump time or `t = 0`).
    pub segment_start: Vec<bool>,
}

impl AdjointCurve {
    /// Largest jump of `P` between consecutive steps of the same segment.
    pub fn interior_increment(&self) -> f64 {
        (1..self.values.len())
            .filter(|&k| !self.segment_start[k])
            .map(|k| {
                let (a, b) = (self.values[k - 1], self.values[k]);
                (a[0] - b[0]).hypot(a[1] - b[1])
            })
            .fold(0.0, f64::max)
    }
}

/// Adjoint curve along a constructed sample, using each step's frozen index.
pub fn adjoint_curve(sample: &RandomCurveSample, problem: &ProblemInstance) -> Result<AdjointCurve, MinimizerError> {
    let curve = &sample.curve;
    let mut out = AdjointCurve { times: Vec::new(), values: Vec::new(), states: Vec::new(), segment_start: Vec::new() };
    for s in 0..curve.steps() {
        let src = curve.sources[s];
        let q = [-curve.velocities[s][0], -curve.velocities[s][1]];
        let p = problem.lagrangian(src.index).grad_q(curve.positions[s], q)?;
        out.times.push(curve.times[s]);
        out.values.push(p);
        out.states.push(src.index);
        out.segment_start.push(s == 0 || curve.sources[s - 1].segment != src.segment);
    }
    Ok(out)
}

/// Residuals of the Hamiltonian system along a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsReport {
    /// `max |-η̇ - ∂_p H(η, P)|` over steps.
    pub velocity_max: f64,
    /// Momentum residuals at smooth interior sample times.
    pub momentum: Vec<f64>,
    pub momentum_median: f64,
    pub excluded_nonsmooth: usize,
    pub excluded_boundary: usize,
}

/// Median of a nonempty slice.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-level grid medians of `max_a |second difference along a|` for each
/// component, computed on first use and shared between samples.
pub struct CurvatureScreen<'a> {
    field: &'a GridField,
    medians: Vec<OnceLock<f64>>,
}

impl<'a> CurvatureScreen<'a> {
    pub fn new(field: &'a GridField) -> Self {
        let cells = field.times().len() * field.m();
        Self { field, medians: (0..cells).map(|_| OnceLock::new()).collect() }
    }

    pub fn field(&self) -> &GridField {
        self.field
    }

    pub fn median(&self, level: usize, j: usize) -> f64 {
        *self.medians[level * self.field.m() + j].get_or_init(|| {
            let field = self.field;
            let grid = field.grid();
            let t = field.times()[level];
            let n = grid.nodes_per_axis();
            let mut d: Vec<f64> = (0..grid.len())
                .filter(|&k| {
                    let (ix, iy) = grid.axes(k);
                    ix > 0 && ix + 1 < n && (grid.dim() == 1 || (iy > 0 && iy + 1 < n))
                })
                .map(|k| {
                    (0..grid.dim()).map(|a| field.second_difference(t, grid.node(k), j, a).abs()).fold(0.0, f64::max)
                })
                .collect();
            median(&mut d)
        })
    }
}

/// Checks `-η̇ = ∂_p H(η, P)` on every step and
/// `Ṗ = -∂_x L(η, -η̇) + Σ_j b_{ω j} D_x u_j(T - t, η)` at sample times inside
/// a segment, where `u` passes a smoothness screen: every component entering
/// the sum must have a second difference within ten times its grid median.
pub fn dynamics_residual(
    sample: &RandomCurveSample,
    adjoint: &AdjointCurve,
    field: &GridField,
    problem: &ProblemInstance,
) -> Result<DynamicsReport, MinimizerError> {
    dynamics_residual_screened(sample, adjoint, &CurvatureScreen::new(field), problem)
}

/// [`dynamics_residual`] with a screen shared across samples.
pub fn dynamics_residual_screened(
    sample: &RandomCurveSample,
    adjoint: &AdjointCurve,
    screen: &CurvatureScreen<'_>,
    problem: &ProblemInstance,
) -> Result<DynamicsReport, MinimizerError> {
    let field = screen.field();
    let curve = &sample.curve;
    let horizon = problem.horizon();
    let b = problem.coupling();
    let grid = field.grid();
    let mut velocity_max: f64 = 0.0;
    for s in 0..curve.steps() {
        let (_, dp) = hamiltonian_gradients(
            problem.hamiltonians().member(adjoint.states[s]),
            curve.positions[s],
            adjoint.values[s],
        )?;
        let v = curve.velocities[s];
        velocity_max = velocity_max.max((-v[0] - dp[0]).hypot(-v[1] - dp[1]));
    }
    let mut report = DynamicsReport {
        velocity_max,
        momentum: Vec::new(),
        momentum_median: f64::NAN,
        excluded_nonsmooth: 0,
        excluded_boundary: 0,
    };
    for k in 1..curve.steps() {
        if adjoint.segment_start[k] {
            report.excluded_boundary += 1;
            continue;
        }
        let t = curve.times[k];
        let x = curve.positions[k];
        let state = adjoint.states[k];
        let s = horizon - t;
        let level = field.times().partition_point(|&r| r < s).min(field.times().len() - 1);
        let level = if level > 0 && (field.times()[level - 1] - s).abs() < (field.times()[level] - s).abs() {
            level - 1
        } else {
            level
        };
        let smooth = (0..problem.m()).filter(|&j| b.entry(state, j) != 0.0).all(|j| {
            let second = (0..grid.dim()).map(|a| field.second_difference(s, x, j, a).abs()).fold(0.0, f64::max);
            second <= 10.0 * screen.median(level, j)
        });
        if !smooth {
            report.excluded_nonsmooth += 1;
            continue;
        }
        let span = 0.5 * (curve.times[k + 1] - curve.times[k - 1]);
        let (p0, p1) = (adjoint.values[k - 1], adjoint.values[k]);
        let pdot = [(p1[0] - p0[0]) / span, (p1[1] - p0[1]) / span];
        let v = [
            0.5 * (curve.velocities[k - 1][0] + curve.velocities[k][0]),
            0.5 * (curve.velocities[k - 1][1] + curve.velocities[k][1]),
        ];
        let lx = problem.lagrangian(state).grad_x(x, [-v[0], -v[1]])?;
        let mut expected = [-lx[0], -lx[1]];
        for j in 0..problem.m() {
            let bj = b.entry(state, j);
            if bj != 0.0 {
                let g = field.gradient(s, x, j);
                expected[0] += bj * g[0];
                expected[1] += bj * g[1];
            }
        }
        report.momentum.push((pdot[0] - expected[0]).hypot(pdot[1] - expected[1]));
    }
    let mut sorted = report.momentum.clone();
    report.momentum_median = median(&mut sorted);
    Ok(report)
}

/// Largest calibration defect over the constancy intervals of a sample:
/// `u_j(T - τ_k, η(τ_k)) = u_j(T - τ_{k+1}, η(τ_{k+1})) + ∫_{τ_k}^{τ_{k+1}} L_G`
/// with `j` the frozen index and `u_j(0, ·)` replaced by the exact datum.
pub fn per_interval_calibration(sample: &RandomCurveSample, field: &GridField, problem: &ProblemInstance) -> f64 {
    let horizon = problem.horizon();
    let last = sample.frozen.len() - 1;
    let mut worst: f64 = 0.0;
    for (k, &j) in sample.frozen.iter().enumerate() {
        let (from, to) = sample.segment_range(k);
        let (t_end, x_end) = (sample.curve.times[to], sample.curve.positions[to]);
        let end = if k == last { problem.initial_value(j, x_end) } else { field.sample(horizon - t_end, x_end, j) };
        worst = worst.max(calibration_between(&sample.curve, problem, field, j, from, to, end));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingMatrix;
    use crate::markov::Jump;
    use crate::path_opt::{calibration_residual, extract_minimizer, solve_segment_dp};
    use crate::pde::solve_semilagrangian;
    use crate::pde::test_problems::*;

    fn two_jumps(h: f64) -> IndexPath {
        IndexPath::new(0, vec![Jump { time: 0.33, state: 1 }, Jump { time: 0.71, state: 0 }], h).unwrap()
    }

    #[test]
    fn no_jump_path_is_the_deterministic_minimizer() {
        let p = reference();
        let res = Resolution::new(0.05, 0.1);
        let u = solve_semilagrangian(&p, &res).unwrap();
        let ctx = MinimizerContext::new(&p, &u, 0.1).unwrap();
        let sample = construct_minimizer(&ctx, &IndexPath::constant(1, 1.0), [0.4, 0.0]).unwrap();
        let seg = SegmentProblem::new(1, 0.0, [0.4, 0.0], RunningCost::Effective(&u));
        let table = solve_segment_dp(&p, &seg, &res).unwrap();
        let det = extract_minimizer(&table, &p, &seg).unwrap();
        assert_eq!(sample.curve.positions, det.positions);
        assert_eq!(sample.frozen, vec![1]);
        let direct = calibration_residual(&det, &p, &u, &seg);
        assert_eq!(per_interval_calibration(&sample, &u, &p), direct);
    }

    #[test]
    fn jump_times_are_sample_times_and_curve_is_continuous() {
        let p = reference();
        let u = solve_semilagrangian(&p, &Resolution::new(0.05, 0.1)).unwrap();
        let ctx = MinimizerContext::new(&p, &u, 0.1).unwrap();
        let sample = construct_minimizer(&ctx, &two_jumps(1.0), [-0.7, 0.0]).unwrap();
        for &tau in &[0.33, 0.71] {
            assert!(sample.curve.times.contains(&tau));
        }
        assert_eq!(sample.segment_starts, vec![0.0, 0.33, 0.71]);
        assert_eq!(sample.frozen, vec![0, 1, 0]);
        assert!(sample.curve.continuity_defect() < 1e-12);
        for (k, &tau) in sample.segment_starts.iter().enumerate() {
            let at = sample.curve.times.iter().position(|&t| t == tau).unwrap();
            assert_eq!(sample.curve.positions[at], sample.segment_points[k]);
        }
        let sum: f64 = sample.curve.increments.iter().sum::<f64>() + sample.curve.terminal_cost;
        assert!((sum - sample.action).abs() < 1e-12);
    }

    #[test]
    fn zero_coupling_gives_deterministic_action() {
        let p = reference().with_coupling(CouplingMatrix::zero(2)).unwrap();
        let res = Resolution::new(0.05, 0.1);
        let u = solve_semilagrangian(&p, &res).unwrap();
        let ctx = MinimizerContext::new(&p, &u, 0.1).unwrap();
        let ens = PathEnsemble::sample(p.coupling(), 0, 1.0, 16, 3);
        let est = expected_action(&ctx, &ens, [0.5, 0.0], 0).unwrap();
        assert_eq!(est.std_error, 0.0);
        let table = ctx.table(0).unwrap();
        let w = table.value_at(&p, &SegmentProblem::new(0, 0.0, [0.5, 0.0], RunningCost::Effective(&u))).unwrap();
        assert!((est.mean - w).abs() < 1e-9);
    }

    #[test]
    fn collapsed_problem_hides_jumps() {
        let p = collapsed(8.0);
        let u = solve_semilagrangian(&p, &Resolution::new(0.02, 0.05)).unwrap();
        let ctx = MinimizerContext::new(&p, &u, 0.05).unwrap();
        let a = construct_minimizer(&ctx, &IndexPath::constant(0, 1.0), [1.2, 0.0]).unwrap();
        let b = construct_minimizer(&ctx, &two_jumps(1.0), [1.2, 0.0]).unwrap();
        for t in [0.1, 0.33, 0.5, 0.71, 0.9, 1.0] {
            let d = (a.curve.position_at(t)[0] - b.curve.position_at(t)[0]).abs();
            assert!(d <= 3.0 * 0.02 + 0.05, "t = {t}: {d}");
        }
    }

    #[test]
    fn constant_curves_match_push_vector() {
        let p = reference();
        let ens = PathEnsemble::sample(p.coupling(), 1, 1.0, 20_000, 11);
        let est = constant_curve_action(&p, &ens, [0.3, 0.0], 1).unwrap();
        let exact = constant_curve_exact(&p, [0.3, 0.0], 1).unwrap();
        assert!((est.mean - exact).abs() <= 3.0 * est.std_error + 1e-12, "{est:?} vs {exact}");
    }

    #[test]
    fn relaxation_without_coupling_is_the_deterministic_value() {
        let p = reference().with_coupling(CouplingMatrix::zero(2)).unwrap();
        let res = Resolution::new(0.05, 0.1);
        let path = IndexPath::constant(0, 1.0);
        let v = switching_value(&p, &path, [0.5, 0.0], &res).unwrap();
        let table = ValueTable::build(&p, 0, 0, RunningCost::Original, &res).unwrap();
        let w = table.value_at(&p, &SegmentProblem::new(0, 0.0, [0.5, 0.0], RunningCost::Original)).unwrap();
        assert!((v - w).abs() < 1e-12, "{v} vs {w}");
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let f: Vec<f64> = (0..40).map(|k| ((k as f64) * 0.37).sin() * 3.0).collect();
        let mut out = vec![0.0; 40];
        distance_transform(&f, 0.05, &mut out, &mut Vec::new(), &mut Vec::new());
        for (k, o) in out.iter().enumerate() {
            let brute = (0..40).map(|j| 0.05 * ((k as f64) - j as f64).powi(2) + f[j]).fold(f64::INFINITY, f64::min);
            assert!((o - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_relaxation_agrees_with_direct_search() {
        let p = reference();
        let grid = p.grid(0.05).unwrap();
        for path in [IndexPath::constant(1, 1.0), two_jumps(1.0)] {
            let plan = StepPlan::new(&path, 1.0, 0.1);
            for x in [[0.4, 0.0], [-1.13, 0.0]] {
                let fast = switching_quadratic(&p, &path, x, &grid, &plan);
                let direct = switching_direct(&p, &path, x, &grid, &plan);
                // Jump steps use different potential quadratures.
                let tol = if path.jumps().is_empty() { 1e-12 } else { 0.02 };
                assert!((fast - direct).abs() <= tol, "{fast} vs {direct}");
            }
        }
    }

    #[test]
    fn quadratic_adjoint_is_minus_velocity() {
        let p = reference();
        let u = solve_semilagrangian(&p, &Resolution::new(0.05, 0.1)).unwrap();
        let ctx = MinimizerContext::new(&p, &u, 0.1).unwrap();
        let sample = construct_minimizer(&ctx, &two_jumps(1.0), [0.9, 0.0]).unwrap();
        let adj = adjoint_curve(&sample, &p).unwrap();
        for (pv, v) in adj.values.iter().zip(&sample.curve.velocities) {
            assert_eq!(pv[0], -v[0]);
        }
        let report = dynamics_residual(&sample, &adj, &u, &p).unwrap();
        assert_eq!(report.velocity_max, 0.0);
    }

    #[test]
    fn nonanticipating_by_construction() {
        use crate::markov::path_rng;
        let p = reference();
        let u = solve_semilagrangian(&p, &Resolution::new(0.05, 0.1)).unwrap();
        let ctx = MinimizerContext::new(&p, &u, 0.1).unwrap();
        let base = two_jumps(1.0);
        let a = construct_minimizer(&ctx, &base, [0.2, 0.0]).unwrap();
        for seed in 0..5 {
            let t = 0.5;
            let other = base.resample_after(p.coupling(), t, &mut path_rng(seed, 0));
            let b = construct_minimizer(&ctx, &other, [0.2, 0.0]).unwrap();
            for (k, &s) in a.curve.times.iter().enumerate().take_while(|(_, &s)| s <= t) {
                assert_eq!(b.curve.times[k], s);
                assert_eq!(b.curve.positions[k], a.curve.positions[k]);
            }
        }
    }
}
