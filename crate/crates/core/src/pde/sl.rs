use rayon::prelude::*;

use super::{FieldMeta, GridField, NodeLagrangian, ProblemInstance, Resolution, SchemeKind, SolverError};
use crate::grid::SpatialGrid;

/// Coupled semi-Lagrangian scheme
/// `u_i(t+h, x) = min_v h·L̄_i(x, v) + (exp(-hB) u(t))_i(x - h v)`.
///
/// Velocities form the lattice `v = -o·Δx/h` for integer offsets `o` with
/// `|v| <= Q_max`, so every foot point is a grid node. The running cost
/// `L̄` is the trapezoid average of `L_i` at the two ends of the step.
/// Ties go to the lexicographically smallest velocity.
pub struct SlSolver<'a> {
    problem: &'a ProblemInstance,
    grid: SpatialGrid,
    dt: f64,
    reversed_coupling: bool,
}

impl<'a> SlSolver<'a> {
    pub fn new(problem: &'a ProblemInstance, dx: f64, dt: f64) -> Result<Self, SolverError> {
        let grid = problem.grid(dx)?;
        if !(dt > 0.0) {
            return Err(SolverError::Resolution(format!("time step {dt} must be positive")));
        }
        if problem.q_max() * dt < grid.dx() {
            return Err(SolverError::Resolution(format!(
                "velocity lattice is empty: Q_max·Δt = {} is below Δx = {}",
                problem.q_max() * dt,
                grid.dx()
            )));
        }
        Ok(Self { problem, grid, dt, reversed_coupling: false })
    }

    /// Replaces `exp(-hB)` by `exp(+hB)`. This breaks monotonicity and
    /// exists only so that the verification harness can be mutation-tested.
    pub fn with_reversed_coupling(mut self, on: bool) -> Self {
        self.reversed_coupling = on;
        self
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn propagator(&self, h: f64) -> Result<Vec<f64>, SolverError> {
        let b = self.problem.coupling();
        if self.reversed_coupling {
            Ok(b.reversed_propagator(h))
        } else {
            let p = b.transition_matrix(h)?;
            let m = b.dim();
            Ok((0..m).flat_map(|i| p.row_slice(i).to_vec()).collect())
        }
    }

    /// One step of length `h` from node-major values `prev` at time `t`.
    pub fn step(&self, prev: &[f64], t: f64, h: f64) -> Result<Vec<f64>, SolverError> {
        let m = self.problem.m();
        let grid = &self.grid;
        let dx = grid.dx();
        let q_max = self.problem.q_max();
        let radius = q_max * h / dx;
        let offsets = grid.offsets_within(q_max * h);
        let outer: Vec<bool> =
            offsets.iter().map(|o| ((o[0] * o[0] + o[1] * o[1]) as f64).sqrt() + 1.0 > radius).collect();
        let reach = radius.floor() as usize;
        let n_axis = grid.nodes_per_axis();
        let p = self.propagator(h)?;
        let mut pushed = vec![0.0; prev.len()];
        pushed.par_chunks_mut(m).enumerate().for_each(|(k, cell)| {
            let here = &prev[k * m..(k + 1) * m];
            for (i, c) in cell.iter_mut().enumerate() {
                *c = p[i * m..(i + 1) * m].iter().zip(here).map(|(a, b)| a * b).sum();
            }
        });
        let lag = NodeLagrangian::new(grid, self.problem.lagrangians());
        let mut out = vec![0.0; prev.len()];
        out.par_chunks_mut(m).enumerate().try_for_each(|(k, cell)| {
            let (ix, iy) = grid.axes(k);
            let interior =
                ix >= reach && ix + reach < n_axis && (grid.dim() == 1 || (iy >= reach && iy + reach < n_axis));
            for (i, c) in cell.iter_mut().enumerate() {
                let mut best = f64::INFINITY;
                let mut best_outer = false;
                // Descending offsets are ascending velocities.
                for (o, &is_outer) in offsets.iter().zip(&outer).rev() {
                    let Some(foot) = grid.offset(k, *o) else { continue };
                    let v = [-(o[0] as f64) * dx / h, -(o[1] as f64) * dx / h];
                    let running = 0.5 * h * (lag.at_node(i, k, v) + lag.at_node(i, foot, v));
                    let value = running + pushed[foot * m + i];
                    if value < best {
                        best = value;
                        best_outer = is_outer;
                    }
                }
                if best_outer && interior && !self.reversed_coupling {
                    return Err(SolverError::VelocityRangeExceeded { t: t + h, x: grid.node(k), q_max });
                }
                *c = best;
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Runs from `initial` at `t0` to `t1` with equal steps of at most `dt`.
    pub fn run(&self, initial: Vec<f64>, t0: f64, t1: f64) -> Result<GridField, SolverError> {
        let span = t1 - t0;
        if !(span >= 0.0) {
            return Err(SolverError::Resolution(format!("empty time span [{t0}, {t1}]")));
        }
        let steps = if span > 0.0 { ((span / self.dt) - 1e-9).ceil().max(1.0) as usize } else { 0 };
        let h = if steps > 0 { span / steps as f64 } else { self.dt };
        let meta = FieldMeta {
            scheme: SchemeKind::SemiLagrangian,
            dx: self.grid.dx(),
            dt: h,
            cfl_bound: None,
            q_max: self.problem.q_max(),
            lipschitz: self.problem.lipschitz(),
        };
        let mut field = GridField::new(self.grid.clone(), self.problem.m(), meta, t0, initial);
        let mut current = field.slice(0).to_vec();
        for n in 0..steps {
            let t = t0 + n as f64 * h;
            current = self.step(&current, t, h)?;
            let t_next = if n + 1 == steps { t1 } else { t0 + (n + 1) as f64 * h };
            field.push_slice(t_next, &current);
        }
        Ok(field)
    }
}

/// Semi-Lagrangian solution on `[0, T]` with step `resolution.dt`.
pub fn solve_semilagrangian(problem: &ProblemInstance, resolution: &Resolution) -> Result<GridField, SolverError> {
    let solver = SlSolver::new(problem, resolution.dx, resolution.dt)?;
    let initial = problem.initial_slice(solver.grid());
    solver.run(initial, 0.0, problem.horizon())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingMatrix;
    use crate::expr::Expr;
    use crate::models::HamiltonianFamily;
    use crate::pde::test_problems::*;

    #[test]
    fn constants_are_preserved() {
        let b = CouplingMatrix::symmetric_two_state(1.0).unwrap();
        let p =
            ProblemInstance::new(b, HamiltonianFamily::free(1, 2), vec![Expr::parse("-0.75").unwrap(); 2], 1.0, 2.0)
                .unwrap()
                .with_q_max(2.0);
        let f = solve_semilagrangian(&p, &Resolution::new(0.05, 0.1)).unwrap();
        assert!(f.last_slice().iter().all(|v| (v + 0.75).abs() < 1e-10));
    }

    #[test]
    fn collapsed_matches_hopf_lax() {
        let p = collapsed(8.0);
        let f = solve_semilagrangian(&p, &Resolution::new(0.02, 0.1)).unwrap();
        let grid = f.grid();
        let mut err: f64 = 0.0;
        for k in 0..grid.len() {
            let x = grid.node(k)[0];
            if x.abs() <= 4.0 {
                err = err.max((f.node_value(f.steps(), k, 1) - x * x / 4.0).abs());
            }
        }
        assert!(err <= 3.0 * 0.02, "err = {err}");
    }

    #[test]
    fn one_step_is_nonexpansive() {
        let p = reference();
        let s = SlSolver::new(&p, 0.05, 0.1).unwrap();
        let a = p.initial_slice(s.grid());
        let b: Vec<f64> = a.iter().enumerate().map(|(k, v)| v + 0.3 * ((k as f64) * 0.7).sin()).collect();
        let d0 = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let sa = s.step(&a, 0.0, 0.1).unwrap();
        let sb = s.step(&b, 0.0, 0.1).unwrap();
        let d1 = sa.iter().zip(&sb).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(d1 <= d0 * (1.0 + 1e-15));
    }

    #[test]
    fn small_truncation_is_reported() {
        let p = reference().with_q_max(0.5);
        let r = solve_semilagrangian(&p, &Resolution::new(0.02, 0.1));
        assert!(matches!(r, Err(SolverError::VelocityRangeExceeded { .. })));
    }
}
