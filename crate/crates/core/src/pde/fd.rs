use rayon::prelude::*;

use super::{FieldMeta, GridField, ProblemInstance, Resolution, SchemeKind, SolverError};
use crate::grid::SpatialGrid;

/// Explicit monotone finite-difference scheme with a local Lax–Friedrichs
/// numerical Hamiltonian: the viscosity on each axis is the largest
/// `|∂_p H_i|` over the interval spanned by the two one-sided differences.
/// The coupling term is explicit.
pub struct FdSolver<'a> {
    problem: &'a ProblemInstance,
    grid: SpatialGrid,
    cfl_bound: f64,
}

impl<'a> FdSolver<'a> {
    pub fn new(problem: &'a ProblemInstance, dx: f64) -> Result<Self, SolverError> {
        let grid = problem.grid(dx)?;
        let speed = problem.q_max();
        let rate = problem.coupling().max_rate();
        let cfl_bound = 1.0 / (2.0 * grid.dim() as f64 * speed / grid.dx() + rate);
        Ok(Self { problem, grid, cfl_bound })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Largest stable step, `1 / (2 N Q_max / Δx + max_i b_ii)`.
    pub fn cfl_bound(&self) -> f64 {
        self.cfl_bound
    }

    /// One explicit step of length `dt` from node-major values `prev`.
    pub fn step(&self, prev: &[f64], dt: f64) -> Vec<f64> {
        let m = self.problem.m();
        let grid = &self.grid;
        let dx = grid.dx();
        let ham = self.problem.hamiltonians();
        let b = self.problem.coupling();
        let mut out = vec![0.0; prev.len()];
        out.par_chunks_mut(m).enumerate().for_each(|(k, cell)| {
            let x = grid.node(k);
            let here = &prev[k * m..(k + 1) * m];
            for i in 0..m {
                let h = ham.member(i);
                let u = here[i];
                let mut pbar = [0.0; 2];
                let mut viscosity = 0.0;
                for axis in 0..grid.dim() {
                    let kl = grid.neighbor_clamped(k, axis, -1);
                    let kr = grid.neighbor_clamped(k, axis, 1);
                    let pm = (u - prev[kl * m + i]) / dx;
                    let pp = (prev[kr * m + i] - u) / dx;
                    pbar[axis] = 0.5 * (pm + pp);
                    let theta = h.axis_speed(x, axis, pm.min(pp), pm.max(pp));
                    viscosity += 0.5 * theta * (pp - pm);
                }
                let numerical = h.value(x, pbar) - viscosity;
                cell[i] = u - dt * (numerical + b.apply_row(i, here));
            }
        });
        out
    }

    /// Runs from `initial` at `t0` to `t1` with steps of at most `dt`
    /// (default: the CFL bound).
    pub fn run(&self, initial: Vec<f64>, t0: f64, t1: f64, dt: Option<f64>) -> Result<GridField, SolverError> {
        let span = t1 - t0;
        if !(span >= 0.0) {
            return Err(SolverError::Resolution(format!("empty time span [{t0}, {t1}]")));
        }
        let target = match dt {
            Some(d) if d > self.cfl_bound * (1.0 + 1e-12) => {
                return Err(SolverError::CFLViolated { dt: d, bound: self.cfl_bound })
            }
            Some(d) if d > 0.0 => d,
            Some(d) => return Err(SolverError::Resolution(format!("time step {d} must be positive"))),
            None => self.cfl_bound,
        };
        let steps = ((span / target) - 1e-9).ceil().max(if span > 0.0 { 1.0 } else { 0.0 }) as usize;
        let h = if steps > 0 { span / steps as f64 } else { 0.0 };
        self.run_steps(initial, t0, steps, h)
    }

    /// Exactly `steps` steps of length `h`.
    pub fn run_steps(&self, initial: Vec<f64>, t0: f64, steps: usize, h: f64) -> Result<GridField, SolverError> {
        if h > self.cfl_bound * (1.0 + 1e-12) {
            return Err(SolverError::CFLViolated { dt: h, bound: self.cfl_bound });
        }
        let lag = self.problem.lagrangians();
        let (mu, big_m) = (lag.infimum(), lag.rest_cost_sup());
        let sup0 = initial.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let meta = FieldMeta {
            scheme: SchemeKind::FiniteDifference,
            dx: self.grid.dx(),
            dt: h,
            cfl_bound: Some(self.cfl_bound),
            q_max: self.problem.q_max(),
            lipschitz: self.problem.lipschitz(),
        };
        let mut field = GridField::new(self.grid.clone(), self.problem.m(), meta, t0, initial);
        let mut current = field.slice(0).to_vec();
        for n in 1..=steps {
            current = self.step(&current, h);
            let elapsed = n as f64 * h;
            let bound = (sup0 - elapsed * mu).abs().max(sup0 + elapsed * big_m);
            let worst = current.iter().fold(0.0f64, |a, v| a.max(if v.is_finite() { v.abs() } else { f64::INFINITY }));
            if worst > 1.1 * bound + 1e-12 {
                return Err(SolverError::BlowUp { t: t0 + elapsed, value: worst, bound });
            }
            field.push_slice(t0 + elapsed, &current);
        }
        Ok(field)
    }
}

/// Finite-difference solution on `[0, T]`.
pub fn solve_fd(problem: &ProblemInstance, resolution: &Resolution) -> Result<GridField, SolverError> {
    let solver = FdSolver::new(problem, resolution.dx)?;
    let initial = problem.initial_slice(solver.grid());
    solver.run(initial, 0.0, problem.horizon(), resolution.fd_dt)
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
        let p = ProblemInstance::new(b, HamiltonianFamily::free(1, 2), vec![Expr::parse("1.5").unwrap(); 2], 1.0, 2.0)
            .unwrap();
        let f = solve_fd(&p, &Resolution::new(0.05, 0.1)).unwrap();
        assert!(f.last_slice().iter().all(|v| (v - 1.5).abs() < 1e-10));
    }

    #[test]
    fn cfl_violation_reported() {
        let p = reference();
        let solver = FdSolver::new(&p, 0.02).unwrap();
        let dt = 2.0 * solver.cfl_bound();
        let r = Resolution { dx: 0.02, dt: 0.1, fd_dt: Some(dt) };
        assert!(matches!(solve_fd(&p, &r), Err(SolverError::CFLViolated { .. })));
    }

    #[test]
    fn collapsed_matches_hopf_lax() {
        let p = collapsed(4.0);
        let f = solve_fd(&p, &Resolution::new(0.02, 0.1)).unwrap();
        let grid = f.grid();
        let mut err: f64 = 0.0;
        for k in 0..grid.len() {
            let x = grid.node(k)[0];
            if x.abs() <= 2.0 {
                err = err.max((f.node_value(f.steps(), k, 0) - x * x / 4.0).abs());
            }
        }
        assert!(err <= 3.0 * 0.02, "err = {err}");
    }

    #[test]
    fn monotone_in_data() {
        let p = reference();
        let solver = FdSolver::new(&p, 0.05).unwrap();
        let base = p.initial_slice(solver.grid());
        let raised: Vec<f64> = base.iter().enumerate().map(|(k, v)| v + 0.01 * ((k % 7) as f64)).collect();
        let a = solver.run(base, 0.0, 0.5, None).unwrap();
        let b = solver.run(raised, 0.0, 0.5, None).unwrap();
        for k in 0..a.times().len() {
            assert!(a.slice(k).iter().zip(b.slice(k)).all(|(x, y)| y >= x));
        }
    }
}
