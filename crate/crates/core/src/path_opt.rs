//! Frozen-index variational dynamic programming.
//!
//! A segment minimizes `u⁰_k(ξ(T)) + ∫_a^T L(t, ξ, -ξ̇) dt` over curves with
//! `ξ(a) = y`, where `t` is the curve parameter. When the running cost is the
//! effective Lagrangian of a solved field `u`, it reads `u` at the reversed
//! time `T - t`; that conversion happens only in [`RunningCost`].

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{norm, sub, Point, SpatialGrid};
use crate::models::Lagrangian;
use crate::pde::{GridField, ProblemInstance, Resolution, SolverError};

#[derive(Debug, Error)]
pub enum PathError {
    #[error("optimal velocity reached the lattice edge |q| = {q_max} at t = {t}, x = {x:?}")]
    VelocityRangeExceeded { t: f64, x: Point, q_max: f64 },
    #[error("point {x:?} at t = {t} is outside the spatial box")]
    OutOfDomain { t: f64, x: Point },
    #[error("forward action {forward} disagrees with table value {table}")]
    InconsistentTable { forward: f64, table: f64 },
    #[error("invalid segment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Running cost of a frozen-index segment.
#[derive(Debug, Clone, Copy)]
pub enum RunningCost<'a> {
    /// `L_j(x, q)`.
    Original,
    /// `L_j(x, q) - (B u(T - t, x))_j` with `u` read from a solved field.
    Effective(&'a GridField),
}

impl<'a> RunningCost<'a> {
    /// The cost at curve time `t`; the field is sampled with clamping.
    pub fn value(&self, problem: &ProblemInstance, index: usize, t: f64, x: Point, q: Point) -> f64 {
        let l = problem.lagrangian(index).value(x, q);
        match self {
            RunningCost::Original => l,
            RunningCost::Effective(field) => l - coupling_term(problem, field, index, problem.horizon() - t, x),
        }
    }

    /// Like [`RunningCost::value`] but rejects points outside the box.
    fn checked(&self, problem: &ProblemInstance, index: usize, t: f64, x: Point, q: Point) -> Result<f64, PathError> {
        if let RunningCost::Effective(field) = self {
            if !field.grid().contains(x) {
                return Err(PathError::OutOfDomain { t, x });
            }
        }
        Ok(self.value(problem, index, t, x, q))
    }
}

/// `(B u(s, x))_j` with `u` sampled from the field.
fn coupling_term(problem: &ProblemInstance, field: &GridField, j: usize, s: f64, x: Point) -> f64 {
    let b = problem.coupling();
    (0..b.dim()).map(|i| b.entry(j, i) * field.sample(s, x, i)).sum()
}

/// One frozen-index minimization from `(start_time, start)` to the horizon.
#[derive(Debug, Clone, Copy)]
pub struct SegmentProblem<'a> {
    pub index: usize,
    /// Component of `u⁰` used as terminal cost.
    pub terminal_index: usize,
    pub start_time: f64,
    pub start: Point,
    pub running: RunningCost<'a>,
}

impl<'a> SegmentProblem<'a> {
    pub fn new(index: usize, start_time: f64, start: Point, running: RunningCost<'a>) -> Self {
        Self { index, terminal_index: index, start_time, start, running }
    }

    pub fn with_terminal_index(mut self, k: usize) -> Self {
        self.terminal_index = k;
        self
    }
}

/// Which segment and frozen index produced a curve step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepSource {
    pub segment: usize,
    pub index: usize,
}

/// Piecewise-linear curve with per-step velocities and action increments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimizingCurve {
    pub dim: usize,
    pub times: Vec<f64>,
    pub positions: Vec<Point>,
    /// Velocity on `[times[k], times[k + 1]]`.
    pub velocities: Vec<Point>,
    pub increments: Vec<f64>,
    pub sources: Vec<StepSource>,
    pub terminal_cost: f64,
    pub total: f64,
}

impl MinimizingCurve {
    pub fn steps(&self) -> usize {
        self.velocities.len()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn end_position(&self) -> Point {
        self.positions[self.positions.len() - 1]
    }

    /// Step containing `t` (the last step for `t` at the end).
    pub fn step_at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        k.clamp(1, self.steps().max(1)) - 1
    }

    /// Linear interpolation of the position.
    pub fn position_at(&self, t: f64) -> Point {
        if self.steps() == 0 {
            return self.positions[0];
        }
        let k = self.step_at(t);
        let dt = t - self.times[k];
        let v = self.velocities[k];
        let p = self.positions[k];
        [p[0] + v[0] * dt, p[1] + v[1] * dt]
    }

    /// Largest speed over all steps.
    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().map(|&v| norm(v)).fold(0.0, f64::max)
    }

    /// Largest gap between consecutive positions and velocity·step.
    pub fn continuity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.steps() {
            let dt = self.times[k + 1] - self.times[k];
            let d = sub(self.positions[k + 1], self.positions[k]);
            let v = self.velocities[k];
            worst = worst.max((d[0] - v[0] * dt).abs()).max((d[1] - v[1] * dt).abs());
        }
        worst
    }

    /// Rows `t,x[,y],v[,vy],action_increment`; the last row carries zero
    /// velocity and the terminal cost, so the last column sums to the total.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(if self.dim == 1 { "t,x,v,action_increment\n" } else { "t,x,y,v,vy,action_increment\n" });
        for (k, (&t, p)) in self.times.iter().zip(&self.positions).enumerate() {
            let (v, inc) = match self.velocities.get(k) {
                Some(&v) => (v, self.increments[k]),
                None => ([0.0; 2], self.terminal_cost),
            };
            if self.dim == 1 {
                let _ = writeln!(s, "{t},{},{},{inc}", p[0], v[0]);
            } else {
                let _ = writeln!(s, "{t},{},{},{},{},{inc}", p[0], p[1], v[0], v[1]);
            }
        }
        s
    }
}

/// Strict improvement beyond rounding, so that mirror-image candidates tie
/// and the first (smallest) velocity is kept.
#[inline]
fn improves(value: f64, best: f64) -> bool {
    if best.is_finite() {
        value < best - 1e-13 * (1.0 + best.abs())
    } else {
        value < best
    }
}

/// A move of the backward recursion.
#[derive(Debug, Clone, Copy)]
struct Move {
    target: usize,
    velocity: Point,
    increment: f64,
    value: f64,
    outer: bool,
}

/// Backward value table `W(t_n, ·)` of a frozen-index segment on the
/// uniform grid `t_n = n·δ` of `[0, T]`.
///
/// Velocities are node offsets per step, `v = o·Δx/δ` with `|v| <= Q_max`,
/// and the running cost of a step is the trapezoid average of its two ends.
/// The table does not depend on the start of the segment, so one table
/// serves every start time and point with the same index and cost.
#[derive(Debug, Clone)]
pub struct ValueTable {
    grid: SpatialGrid,
    index: usize,
    terminal_index: usize,
    horizon: f64,
    step: f64,
    levels: usize,
    q_max: f64,
    lagrangian: Lagrangian,
    quadratic: bool,
    /// Velocity-independent part of the running cost per level and node.
    shift: Vec<f64>,
    values: Vec<f64>,
    offsets: Vec<[i64; 2]>,
    outer: Vec<bool>,
    reach: usize,
}

impl ValueTable {
    /// Runs the backward recursion from `W(T, ·) = u⁰_k` at the nodes.
    pub fn build(
        problem: &ProblemInstance,
        index: usize,
        terminal_index: usize,
        running: RunningCost<'_>,
        resolution: &Resolution,
    ) -> Result<Self, PathError> {
        let m = problem.m();
        if index >= m || terminal_index >= m {
            return Err(PathError::Invalid(format!("index {index} or {terminal_index} out of range 0..{m}")));
        }
        let horizon = problem.horizon();
        if let RunningCost::Effective(field) = running {
            let tol = 1e-9 * (1.0 + horizon);
            if field.m() != m || field.start_time() > tol || field.end_time() < horizon - tol {
                return Err(PathError::Invalid("field does not cover the horizon for every component".into()));
            }
        }
        let grid = problem.grid(resolution.dx)?;
        if !(resolution.dt > 0.0) || !(horizon > 0.0) {
            return Err(PathError::Invalid(format!("time step {} on horizon {horizon}", resolution.dt)));
        }
        let levels = ((horizon / resolution.dt) - 1e-9).ceil().max(1.0) as usize;
        let step = horizon / levels as f64;
        let q_max = problem.q_max();
        let dx = grid.dx();
        if q_max * step < dx * (grid.dim() as f64).sqrt() {
            return Err(PathError::Invalid(format!(
                "velocity lattice too coarse: Q_max·δ = {} below Δx·√N = {}",
                q_max * step,
                dx * (grid.dim() as f64).sqrt()
            )));
        }
        let lagrangian = problem.lagrangian(index).clone();
        let potential = lagrangian.potential().cloned();
        let n = grid.len();
        let mut shift = vec![0.0; (levels + 1) * n];
        shift.par_chunks_mut(n).enumerate().for_each(|(level, row)| {
            let t = level as f64 * step;
            for (k, s) in row.iter_mut().enumerate() {
                let x = grid.node(k);
                let mut c = potential.as_ref().map_or(0.0, |p| -p.value(x));
                if let RunningCost::Effective(field) = running {
                    c -= coupling_term(problem, field, index, horizon - t, x);
                }
                *s = c;
            }
        });
        let radius = q_max * step / dx;
        let offsets = grid.offsets_within(q_max * step);
        let outer = offsets.iter().map(|o| ((o[0] * o[0] + o[1] * o[1]) as f64).sqrt() + 1.0 > radius).collect();
        let mut table = Self {
            quadratic: potential.is_some(),
            grid,
            index,
            terminal_index,
            horizon,
            step,
            levels,
            q_max,
            lagrangian,
            shift,
            values: Vec::new(),
            offsets,
            outer,
            reach: radius.floor() as usize,
        };
        let mut values = vec![0.0; (levels + 1) * n];
        for (k, w) in values[levels * n..].iter_mut().enumerate() {
            *w = problem.initial_value(terminal_index, table.grid.node(k));
        }
        for level in (0..levels).rev() {
            let (head, tail) = values.split_at_mut((level + 1) * n);
            let next = &tail[..n];
            let row = &mut head[level * n..];
            let t = table.time(level);
            row.par_iter_mut().enumerate().try_for_each(|(k, w)| {
                let mv = table.best_move(level, k, next);
                if mv.outer && table.is_interior(k) {
                    return Err(PathError::VelocityRangeExceeded { t, x: table.grid.node(k), q_max });
                }
                *w = mv.value;
                Ok(())
            })?;
        }
        table.values = values;
        Ok(table)
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn terminal_index(&self) -> usize {
        self.terminal_index
    }

    /// Uniform step `δ`.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.levels {
            self.horizon
        } else {
            level as f64 * self.step
        }
    }

    /// `W(t_level, node)`.
    pub fn value(&self, level: usize, node: usize) -> f64 {
        self.values[level * self.grid.len() + node]
    }

    /// Values on one level, node-ordered.
    pub fn level_values(&self, level: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[level * n..(level + 1) * n]
    }

    fn is_interior(&self, k: usize) -> bool {
        let (ix, iy) = self.grid.axes(k);
        let n = self.grid.nodes_per_axis();
        let r = self.reach;
        ix >= r && ix + r < n && (self.grid.dim() == 1 || (iy >= r && iy + r < n))
    }

    #[inline]
    fn node_cost(&self, level: usize, node: usize, q: Point) -> f64 {
        let s = self.shift[level * self.grid.len() + node];
        if self.quadratic {
            0.5 * (q[0] * q[0] + q[1] * q[1]) + s
        } else {
            self.lagrangian.value(self.grid.node(node), q) + s
        }
    }

    /// Minimizing node move from `(level, k)`; ties go to the smallest velocity.
    fn best_move(&self, level: usize, k: usize, next: &[f64]) -> Move {
        let dx = self.grid.dx();
        let mut best = Move { target: k, velocity: [0.0; 2], increment: 0.0, value: f64::INFINITY, outer: false };
        for (o, &outer) in self.offsets.iter().zip(&self.outer) {
            let Some(target) = self.grid.offset(k, *o) else { continue };
            let v = [o[0] as f64 * dx / self.step, o[1] as f64 * dx / self.step];
            let q = [-v[0], -v[1]];
            let increment = 0.5 * self.step * (self.node_cost(level, k, q) + self.node_cost(level + 1, target, q));
            let value = increment + next[target];
            if improves(value, best.value) {
                best = Move { target, velocity: v, increment, value, outer };
            }
        }
        best
    }

    /// First move from an arbitrary `(a, y)`: either directly on the table
    /// when `(a, y)` is a grid point, or a partial step of length in
    /// `[δ/2, 3δ/2)` to a later level (shorter only when it ends at `T`).
    fn entry(&self, problem: &ProblemInstance, seg: &SegmentProblem<'_>) -> Result<Entry, PathError> {
        let (a, y) = (seg.start_time, seg.start);
        let tol = 1e-9 * (1.0 + self.horizon);
        if !self.grid.contains(y) {
            return Err(PathError::OutOfDomain { t: a, x: y });
        }
        if !(a >= -tol && a <= self.horizon + tol) {
            return Err(PathError::Invalid(format!("start time {a} outside [0, {}]", self.horizon)));
        }
        if a >= self.horizon - tol {
            let terminal = problem.initial_value(self.terminal_index, y);
            return Ok(Entry { partial: None, level: self.levels, node: None, value: terminal });
        }
        let level = (a / self.step).round() as usize;
        if (a - self.time(level)).abs() <= tol {
            if let Some(node) = self.grid.node_at(y) {
                return Ok(Entry { partial: None, level, node: Some(node), value: self.value(level, node) });
            }
        }
        let mut landing = ((a + 0.5 * self.step - tol) / self.step).ceil() as usize;
        landing = landing.min(self.levels);
        let span = self.time(landing) - a;
        let reach = self.q_max * span;
        let dx = self.grid.dx();
        let start_cost = |q: Point| seg.running.checked(problem, self.index, a, y, q);
        let mut best: Option<(PartialStep, f64)> = None;
        let mut consider =
            |point: Point, node: Option<usize>, end_cost: f64, q: Point, v: Point| -> Result<(), PathError> {
                let increment = 0.5 * span * (start_cost(q)? + end_cost);
                let tail = match node {
                    Some(k) => self.value(landing, k),
                    None => problem.initial_value(self.terminal_index, point),
                };
                let value = increment + tail;
                if best.as_ref().is_none_or(|(_, b)| improves(value, *b)) {
                    best = Some((PartialStep { duration: span, point, node, velocity: v, increment }, value));
                }
                Ok(())
            };
        if landing == self.levels {
            // Off-grid landings at `T` use the exact terminal cost.
            for o in self.grid.offsets_within(reach) {
                let point = [y[0] + o[0] as f64 * dx, y[1] + o[1] as f64 * dx];
                if !self.grid.contains(point) {
                    continue;
                }
                let v = [o[0] as f64 * dx / span, o[1] as f64 * dx / span];
                let q = [-v[0], -v[1]];
                let node = self.grid.node_at(point);
                let end_cost = match node {
                    Some(k) => self.node_cost(landing, k, q),
                    None => seg.running.checked(problem, self.index, self.horizon, point, q)?,
                };
                consider(point, node, end_cost, q, v)?;
            }
        } else {
            let center = self.grid.nearest(y);
            let r = (reach / dx).ceil() as i64 + 1;
            let ry = if self.grid.dim() == 2 { r } else { 0 };
            for ox in -r..=r {
                for oy in -ry..=ry {
                    let Some(k) = self.grid.offset(center, [ox, oy]) else { continue };
                    let point = self.grid.node(k);
                    let d = sub(point, y);
                    if norm(d) > reach * (1.0 + 1e-12) {
                        continue;
                    }
                    let v = [d[0] / span, d[1] / span];
                    let q = [-v[0], -v[1]];
                    consider(point, Some(k), self.node_cost(landing, k, q), q, v)?;
                }
            }
        }
        let (partial, value) =
            best.ok_or_else(|| PathError::Invalid(format!("no admissible first move from {y:?} at t = {a}")))?;
        Ok(Entry { level: landing, node: partial.node, partial: Some(partial), value })
    }

    /// `W(a, y)` for an arbitrary start.
    pub fn value_at(&self, problem: &ProblemInstance, seg: &SegmentProblem<'_>) -> Result<f64, PathError> {
        Ok(self.entry(problem, seg)?.value)
    }
}

#[derive(Debug, Clone, Copy)]
struct PartialStep {
    duration: f64,
    point: Point,
    node: Option<usize>,
    velocity: Point,
    increment: f64,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    partial: Option<PartialStep>,
    level: usize,
    node: Option<usize>,
    value: f64,
}

fn check_segment(problem: &ProblemInstance, seg: &SegmentProblem<'_>) -> Result<(), PathError> {
    let m = problem.m();
    if seg.index >= m || seg.terminal_index >= m {
        return Err(PathError::Invalid(format!("index {} or {} out of range 0..{m}", seg.index, seg.terminal_index)));
    }
    let t = problem.horizon();
    if !(seg.start_time >= 0.0 && seg.start_time <= t * (1.0 + 1e-12)) {
        return Err(PathError::Invalid(format!("start time {} outside [0, {t}]", seg.start_time)));
    }
    let x = problem.half_width() * (1.0 + 1e-9);
    let inside =
        seg.start[0].abs() <= x && if problem.dim() == 1 { seg.start[1] == 0.0 } else { seg.start[1].abs() <= x };
    if !inside {
        return Err(PathError::OutOfDomain { t: seg.start_time, x: seg.start });
    }
    Ok(())
}

/// Backward value table for `seg`; valid for any start of the same index,
/// terminal index and running cost.
pub fn solve_segment_dp(
    problem: &ProblemInstance,
    seg: &SegmentProblem<'_>,
    resolution: &Resolution,
) -> Result<ValueTable, PathError> {
    check_segment(problem, seg)?;
    ValueTable::build(problem, seg.index, seg.terminal_index, seg.running, resolution)
}

/// Forward pass from `(a, y)` choosing the step minimizers of `table`.
pub fn extract_minimizer(
    table: &ValueTable,
    problem: &ProblemInstance,
    seg: &SegmentProblem<'_>,
) -> Result<MinimizingCurve, PathError> {
    extract_with_source(table, problem, seg, StepSource { segment: 0, index: seg.index }, f64::INFINITY)
}

/// Forward pass stopped at the first level at or after `until`.
pub(crate) fn extract_with_source(
    table: &ValueTable,
    problem: &ProblemInstance,
    seg: &SegmentProblem<'_>,
    source: StepSource,
    until: f64,
) -> Result<MinimizingCurve, PathError> {
    check_segment(problem, seg)?;
    if seg.index != table.index || seg.terminal_index != table.terminal_index {
        return Err(PathError::Invalid("segment does not match the value table".into()));
    }
    let entry = table.entry(problem, seg)?;
    let mut curve = MinimizingCurve {
        dim: table.grid.dim(),
        times: vec![seg.start_time],
        positions: vec![seg.start],
        velocities: Vec::new(),
        increments: Vec::new(),
        sources: Vec::new(),
        terminal_cost: 0.0,
        total: 0.0,
    };
    if let Some(p) = entry.partial {
        curve.times.push(seg.start_time + p.duration);
        curve.positions.push(p.point);
        curve.velocities.push(p.velocity);
        curve.increments.push(p.increment);
        curve.sources.push(source);
    }
    let tol = 1e-9 * (1.0 + table.horizon);
    let mut finished = entry.level == table.levels;
    if let Some(mut node) = entry.node {
        let mut level = entry.level;
        while level < table.levels && table.time(level) < until - tol {
            let mv = table.best_move(level, node, table.level_values(level + 1));
            level += 1;
            node = mv.target;
            curve.times.push(table.time(level));
            curve.positions.push(table.grid.node(node));
            curve.velocities.push(mv.velocity);
            curve.increments.push(mv.increment);
            curve.sources.push(source);
        }
        finished = level == table.levels;
    }
    if !finished {
        return Ok(curve);
    }
    curve.terminal_cost = problem.initial_value(table.terminal_index, curve.end_position());
    let running: f64 = curve.increments.iter().sum();
    curve.total = running + curve.terminal_cost;
    if (curve.total - entry.value).abs() > 1e-8 * (1.0 + entry.value.abs()) {
        return Err(PathError::InconsistentTable { forward: curve.total, table: entry.value });
    }
    Ok(curve)
}

/// Trapezoid integral of the effective Lagrangian of `field` over steps
/// `from..to` of `curve`, with the frozen index `index`.
pub(crate) fn effective_integral(
    curve: &MinimizingCurve,
    problem: &ProblemInstance,
    field: &GridField,
    index: usize,
    from: usize,
    to: usize,
) -> f64 {
    let cost = RunningCost::Effective(field);
    (from..to)
        .map(|k| {
            let q = [-curve.velocities[k][0], -curve.velocities[k][1]];
            let dt = curve.times[k + 1] - curve.times[k];
            0.5 * dt
                * (cost.value(problem, index, curve.times[k], curve.positions[k], q)
                    + cost.value(problem, index, curve.times[k + 1], curve.positions[k + 1], q))
        })
        .sum()
}

/// Largest `|u_j(T - t_k, ξ(t_k)) - end - ∫_{t_k}^{t_last} L_G|` over sample
/// indices `from..=to`, where `end` is the value assigned to `ξ(t_to)`.
pub(crate) fn calibration_between(
    curve: &MinimizingCurve,
    problem: &ProblemInstance,
    field: &GridField,
    index: usize,
    from: usize,
    to: usize,
    end: f64,
) -> f64 {
    let horizon = problem.horizon();
    let mut tail = 0.0;
    let mut worst: f64 = 0.0;
    for k in (from..=to).rev() {
        if k < to {
            tail += effective_integral(curve, problem, field, index, k, k + 1);
        }
        let u = field.sample(horizon - curve.times[k], curve.positions[k], index);
        worst = worst.max((u - end - tail).abs());
    }
    worst
}

/// Calibration residual `max_t |u_j(T - t, ξ(t)) - u⁰_k(ξ(T)) - ∫_t^T L_G|`
/// along an extracted segment curve, with trapezoid quadrature.
pub fn calibration_residual(
    curve: &MinimizingCurve,
    problem: &ProblemInstance,
    field: &GridField,
    seg: &SegmentProblem<'_>,
) -> f64 {
    let end = problem.initial_value(seg.terminal_index, curve.end_position());
    calibration_between(curve, problem, field, seg.index, 0, curve.steps(), end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::test_problems::*;

    #[test]
    fn quadratic_segment_matches_hopf_lax() {
        let p = collapsed(8.0);
        let res = Resolution::new(0.02, 0.05);
        let seg = SegmentProblem::new(0, 0.3, [1.0, 0.0], RunningCost::Original);
        let table = solve_segment_dp(&p, &seg, &res).unwrap();
        for &(a, y) in &[(0.3, 1.0), (0.0, -2.0), (0.55, 0.4), (0.97, 1.31)] {
            let s = SegmentProblem::new(0, a, [y, 0.0], RunningCost::Original);
            let w = table.value_at(&p, &s).unwrap();
            let exact = y * y / (2.0 * (2.0 - a));
            assert!((w - exact).abs() < 3.0 * 0.02, "a={a} y={y} w={w} exact={exact}");
        }
    }

    #[test]
    fn extracted_curve_follows_straight_line() {
        let p = collapsed(8.0);
        let res = Resolution::new(0.01, 0.05);
        let a = 0.2;
        let y = 1.5;
        let seg = SegmentProblem::new(1, a, [y, 0.0], RunningCost::Original);
        let table = solve_segment_dp(&p, &seg, &res).unwrap();
        let curve = extract_minimizer(&table, &p, &seg).unwrap();
        assert_eq!(curve.start_time(), a);
        assert!((curve.end_time() - 1.0).abs() < 1e-12);
        for (&t, x) in curve.times.iter().zip(&curve.positions) {
            let exact = y * (1.0 + (1.0 - t)) / (1.0 + (1.0 - a));
            assert!((x[0] - exact).abs() < 3.0 * 0.01 + 0.05 * 0.1, "t={t} x={} exact={exact}", x[0]);
        }
        assert!(curve.continuity_defect() < 1e-12);
        assert!(curve.max_speed() <= p.q_max() * (1.0 + 1e-12));
        let sum: f64 = curve.increments.iter().sum::<f64>() + curve.terminal_cost;
        assert!((sum - curve.total).abs() < 1e-12);
    }

    #[test]
    fn zero_length_segment_is_terminal_cost() {
        let p = reference();
        let res = Resolution::new(0.05, 0.1);
        let seg = SegmentProblem::new(1, 1.0, [0.73, 0.0], RunningCost::Original);
        let table = solve_segment_dp(&p, &seg, &res).unwrap();
        assert_eq!(table.value_at(&p, &seg).unwrap(), 0.73);
        let curve = extract_minimizer(&table, &p, &seg).unwrap();
        assert_eq!(curve.steps(), 0);
        assert_eq!(curve.total, 0.73);
    }

    #[test]
    fn effective_equals_original_without_coupling() {
        let p = reference().with_coupling(crate::coupling::CouplingMatrix::zero(2)).unwrap();
        let res = Resolution::new(0.05, 0.1);
        let field = crate::pde::solve_semilagrangian(&p, &res).unwrap();
        let a = ValueTable::build(&p, 0, 0, RunningCost::Original, &res).unwrap();
        let b = ValueTable::build(&p, 0, 0, RunningCost::Effective(&field), &res).unwrap();
        for level in 0..=a.levels() {
            for (x, y) in a.level_values(level).iter().zip(b.level_values(level)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tie_break_is_deterministic() {
        // Symmetric double well: from the symmetry point both wells are optimal.
        let b = crate::coupling::CouplingMatrix::zero(1);
        let u0 = vec![crate::expr::Expr::parse("min((x-1)^2, (x+1)^2)").unwrap()];
        let h = crate::models::HamiltonianFamily::free(1, 1);
        let p = ProblemInstance::new(b, h, u0, 1.0, 4.0).unwrap();
        let res = Resolution::new(0.02, 0.05);
        let seg = SegmentProblem::new(0, 0.0, [0.0, 0.0], RunningCost::Original);
        let table = solve_segment_dp(&p, &seg, &res).unwrap();
        let c1 = extract_minimizer(&table, &p, &seg).unwrap();
        let c2 = extract_minimizer(&solve_segment_dp(&p, &seg, &res).unwrap(), &p, &seg).unwrap();
        assert_eq!(c1, c2);
        assert!(c1.end_position()[0] < 0.0, "smaller velocity branch goes left");
    }

    #[test]
    fn calibration_at_terminal_time_is_interpolation_error() {
        let p = reference();
        let res = Resolution::new(0.05, 0.1);
        let field = crate::pde::solve_semilagrangian(&p, &res).unwrap();
        let seg = SegmentProblem::new(0, 1.0, [0.3, 0.0], RunningCost::Effective(&field));
        let table = solve_segment_dp(&p, &seg, &res).unwrap();
        let curve = extract_minimizer(&table, &p, &seg).unwrap();
        let r = calibration_residual(&curve, &p, &field, &seg);
        assert!(r <= 0.05 * 0.05 / 8.0 * 2.0 + 1e-12, "r = {r}");
    }

    #[test]
    fn out_of_box_start_rejected() {
        let p = reference();
        let seg = SegmentProblem::new(0, 0.0, [9.0, 0.0], RunningCost::Original);
        assert!(matches!(solve_segment_dp(&p, &seg, &Resolution::new(0.05, 0.1)), Err(PathError::OutOfDomain { .. })));
    }
}
