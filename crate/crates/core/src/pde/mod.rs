//! Grid solvers for the weakly coupled system
//! `∂_t u_i + H_i(x, D_x u_i) + (Bu)_i = 0`, `u(0) = u⁰`, on the box
//! `[-X, X]^N` with constant extension outside.

mod bounds;
mod fd;
mod field;
mod sl;

pub use bounds::{apriori_bounds_check, apriori_bounds_check_with, BoundsReport};
pub use fd::{solve_fd, FdSolver};
pub use field::{evaluate, FieldMeta, GridField, SchemeKind};
pub use sl::{solve_semilagrangian, SlSolver};

use serde::Serialize;
use thiserror::Error;

use crate::coupling::{CouplingError, CouplingMatrix};
use crate::expr::Expr;
use crate::grid::{add, scale, GridError, Point, SpatialGrid};
use crate::models::{HamiltonianFamily, Lagrangian, LagrangianFamily};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("time step {dt} violates the CFL bound {bound}")]
    CFLViolated { dt: f64, bound: f64 },
    #[error("blow-up at t = {t}: |u| = {value} exceeds 110% of the a-priori bound {bound}")]
    BlowUp { t: f64, value: f64, bound: f64 },
    #[error("minimizing velocity at t = {t}, x = {x:?} sits on the velocity lattice boundary (Q_max = {q_max})")]
    VelocityRangeExceeded { t: f64, x: Point, q_max: f64 },
    #[error("point t = {t}, x = {x:?} is outside the grid domain")]
    OutOfDomain { t: f64, x: Point },
    #[error("a-priori bound violated at t = {t}, x = {x:?}, component {component}: slack {slack} below -{tolerance}")]
    BoundViolated { t: f64, x: Point, component: usize, slack: f64, tolerance: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("resolution: {0}")]
    Resolution(String),
    #[error("field file: {0}")]
    Format(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

/// Resolution of the grid solvers. `dt` is the step of the semi-Lagrangian
/// scheme and of the path dynamic programs; the finite-difference scheme
/// uses `fd_dt` or, when absent, the largest step allowed by its CFL bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Resolution {
    pub dx: f64,
    pub dt: f64,
    pub fd_dt: Option<f64>,
}

impl Resolution {
    pub fn new(dx: f64, dt: f64) -> Self {
        Self { dx, dt, fd_dt: None }
    }

    pub fn halved(&self) -> Self {
        Self { dx: self.dx / 2.0, dt: self.dt / 2.0, fd_dt: self.fd_dt.map(|d| d / 2.0) }
    }
}

/// One component of the initial datum with its measured bounds on the box.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDatum {
    expr: Expr,
    sup_abs: f64,
    lipschitz: f64,
}

impl InitialDatum {
    fn measure(expr: Expr, dim: usize, half_width: f64) -> Result<Self, SolverError> {
        const EPS: f64 = 1e-7;
        let n: usize = if dim == 1 { 4000 } else { 400 };
        let h = 2.0 * half_width / n as f64;
        let coord = |k: usize| -half_width + k as f64 * h;
        let (mut sup_abs, mut lip) = (0.0f64, 0.0f64);
        let ny = if dim == 1 { 0 } else { n };
        for iy in 0..=ny {
            let y = if dim == 1 { 0.0 } else { coord(iy) };
            for ix in 0..=n {
                let p = [coord(ix), y];
                let v = expr.eval(p);
                if !v.is_finite() {
                    return Err(SolverError::InvalidProblem(format!("initial datum `{expr}` is not finite at {p:?}")));
                }
                sup_abs = sup_abs.max(v.abs());
                // One-sided slopes over a tiny step catch kinks that the
                // lattice secants straddle.
                let slope = |e: Point| {
                    let fwd = (expr.eval(add(p, scale(e, EPS))) - v) / EPS;
                    let bwd = (v - expr.eval(add(p, scale(e, -EPS)))) / EPS;
                    fwd.abs().max(bwd.abs())
                };
                let gx = slope([1.0, 0.0]);
                let gy = if dim == 2 { slope([0.0, 1.0]) } else { 0.0 };
                lip = lip.max((gx * gx + gy * gy).sqrt());
            }
        }
        Ok(Self { expr, sup_abs, lipschitz: lip })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn sup_abs(&self) -> f64 {
        self.sup_abs
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    #[inline]
    pub fn eval(&self, p: Point) -> f64 {
        self.expr.eval(p)
    }
}

/// A complete evolution problem: coupling, Hamiltonians, initial datum,
/// horizon and box.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    coupling: CouplingMatrix,
    hamiltonians: HamiltonianFamily,
    lagrangians: LagrangianFamily,
    initial: Vec<InitialDatum>,
    horizon: f64,
    half_width: f64,
    lipschitz: f64,
    q_max: f64,
}

impl ProblemInstance {
    /// Measures `u⁰` on the box, sets the gradient estimate
    /// `κ = Lip(u⁰) + T·sup|∂_x H|` and the velocity truncation
    /// `Q_max = sup{|∂_p H| : |p| <= κ + 1}`.
    pub fn new(
        coupling: CouplingMatrix,
        hamiltonians: HamiltonianFamily,
        initial: Vec<Expr>,
        horizon: f64,
        half_width: f64,
    ) -> Result<Self, SolverError> {
        let m = coupling.dim();
        if hamiltonians.len() != m || initial.len() != m {
            return Err(SolverError::InvalidProblem(format!(
                "{m} equations but {} Hamiltonians and {} initial components",
                hamiltonians.len(),
                initial.len()
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SolverError::InvalidProblem(format!("horizon {horizon} must be positive")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(SolverError::InvalidProblem(format!("box half-width {half_width} must be positive")));
        }
        let dim = hamiltonians.dim();
        if dim == 1 {
            if let Some(e) = initial.iter().find(|e| e.uses_y()) {
                return Err(SolverError::InvalidProblem(format!("`{e}` uses y in a one-dimensional problem")));
            }
        }
        let initial =
            initial.into_iter().map(|e| InitialDatum::measure(e, dim, half_width)).collect::<Result<Vec<_>, _>>()?;
        let lip0 = initial.iter().map(|d| d.lipschitz).fold(0.0, f64::max);
        let lipschitz = lip0 + horizon * hamiltonians.spatial_gradient_bound();
        let q_max = hamiltonians.max_speed(lipschitz + 1.0);
        let lagrangians = hamiltonians.lagrangians(q_max);
        Ok(Self { coupling, hamiltonians, lagrangians, initial, horizon, half_width, lipschitz, q_max })
    }

    /// Replaces the velocity truncation (and rebuilds tabulated Lagrangians).
    pub fn with_q_max(mut self, q_max: f64) -> Self {
        self.q_max = q_max;
        self.lagrangians = self.hamiltonians.lagrangians(q_max);
        self
    }

    /// Same problem with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self, SolverError> {
        Self::new(
            self.coupling.clone(),
            self.hamiltonians.clone(),
            self.initial.iter().map(|d| d.expr.clone()).collect(),
            horizon,
            self.half_width,
        )
        .map(|p| p.with_q_max(self.q_max))
    }

    /// Same problem on a different box.
    pub fn with_half_width(&self, half_width: f64) -> Result<Self, SolverError> {
        Self::new(
            self.coupling.clone(),
            self.hamiltonians.clone(),
            self.initial.iter().map(|d| d.expr.clone()).collect(),
            self.horizon,
            half_width,
        )
        .map(|p| p.with_q_max(self.q_max))
    }

    /// Same problem with another initial datum (bounds re-measured, `Q_max` kept).
    pub fn with_initial(&self, initial: Vec<Expr>) -> Result<Self, SolverError> {
        Self::new(self.coupling.clone(), self.hamiltonians.clone(), initial, self.horizon, self.half_width)
            .map(|p| p.with_q_max(self.q_max))
    }

    /// Same problem with another coupling matrix.
    pub fn with_coupling(&self, coupling: CouplingMatrix) -> Result<Self, SolverError> {
        Self::new(
            coupling,
            self.hamiltonians.clone(),
            self.initial.iter().map(|d| d.expr.clone()).collect(),
            self.horizon,
            self.half_width,
        )
        .map(|p| p.with_q_max(self.q_max))
    }

    pub fn coupling(&self) -> &CouplingMatrix {
        &self.coupling
    }

    pub fn hamiltonians(&self) -> &HamiltonianFamily {
        &self.hamiltonians
    }

    pub fn lagrangians(&self) -> &LagrangianFamily {
        &self.lagrangians
    }

    pub fn lagrangian(&self, i: usize) -> &Lagrangian {
        self.lagrangians.member(i)
    }

    pub fn initial(&self) -> &[InitialDatum] {
        &self.initial
    }

    pub fn m(&self) -> usize {
        self.coupling.dim()
    }

    pub fn dim(&self) -> usize {
        self.hamiltonians.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Gradient bound `κ` for the solution.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    /// `‖u⁰‖_∞` on the box.
    pub fn initial_sup(&self) -> f64 {
        self.initial.iter().map(|d| d.sup_abs).fold(0.0, f64::max)
    }

    pub fn initial_value(&self, i: usize, p: Point) -> f64 {
        self.initial[i].eval(p)
    }

    pub fn initial_vector(&self, p: Point) -> Vec<f64> {
        self.initial.iter().map(|d| d.eval(p)).collect()
    }

    pub fn grid(&self, dx: f64) -> Result<SpatialGrid, SolverError> {
        Ok(SpatialGrid::new(self.dim(), self.half_width, dx)?)
    }

    /// `u⁰` sampled at the nodes, node-major.
    pub fn initial_slice(&self, grid: &SpatialGrid) -> Vec<f64> {
        let m = self.m();
        let mut out = Vec::with_capacity(grid.len() * m);
        for k in 0..grid.len() {
            let p = grid.node(k);
            out.extend(self.initial.iter().map(|d| d.eval(p)));
        }
        out
    }
}

/// Lagrangian values at grid nodes, with a fast path for the quadratic family.
pub(crate) struct NodeLagrangian<'a> {
    grid: &'a SpatialGrid,
    family: &'a LagrangianFamily,
    /// `-V_i` at every node, when all members are quadratic.
    potentials: Option<Vec<Vec<f64>>>,
}

impl<'a> NodeLagrangian<'a> {
    pub(crate) fn new(grid: &'a SpatialGrid, family: &'a LagrangianFamily) -> Self {
        let potentials = family.is_quadratic().then(|| {
            (0..family.len())
                .map(|i| {
                    let v = family.member(i).potential().expect("quadratic member");
                    (0..grid.len()).map(|k| -v.value(grid.node(k))).collect()
                })
                .collect()
        });
        Self { grid, family, potentials }
    }

    #[inline]
    pub(crate) fn at_node(&self, i: usize, node: usize, q: Point) -> f64 {
        match &self.potentials {
            Some(p) => 0.5 * (q[0] * q[0] + q[1] * q[1]) + p[i][node],
            None => self.family.member(i).value(self.grid.node(node), q),
        }
    }

    #[inline]
    pub(crate) fn at_point(&self, i: usize, x: Point, q: Point) -> f64 {
        self.family.member(i).value(x, q)
    }
}

/// Two-state benchmark on `[-8, 8]` over `[0, 1]`: `H_i = ½p² + a_i cos(x + φ_i)`
/// with `a = (0.3, 0.5)`, `φ = (0, π/2)`, symmetric unit switching rates and
/// data `min(x², 4)`, `min(|x|, 2)`.
pub fn reference_problem() -> ProblemInstance {
    let b = CouplingMatrix::symmetric_two_state(1.0).expect("valid coupling");
    let h = HamiltonianFamily::quadratic_cosine(&[0.3, 0.5], &[1.0, 1.0], &[0.0, std::f64::consts::FRAC_PI_2])
        .expect("valid family");
    let u0 = vec![Expr::parse("min(x^2, 4)").expect("valid"), Expr::parse("min(|x|, 2)").expect("valid")];
    ProblemInstance::new(b, h, u0, 1.0, 8.0).expect("valid reference problem")
}

#[cfg(test)]
pub(crate) mod test_problems {
    use super::*;

    pub fn reference() -> ProblemInstance {
        super::reference_problem()
    }

    /// Identical components `½x²`, zero potentials.
    pub fn collapsed(half_width: f64) -> ProblemInstance {
        let b = CouplingMatrix::symmetric_two_state(1.0).unwrap();
        let u0 = vec![Expr::parse("0.5*x^2").unwrap(); 2];
        ProblemInstance::new(b, HamiltonianFamily::free(1, 2), u0, 1.0, half_width).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_problems::*;

    #[test]
    fn reference_constants() {
        let p = reference();
        assert!((p.lipschitz() - 4.5).abs() < 1e-6, "κ = {}", p.lipschitz());
        assert!((p.q_max() - 5.5).abs() < 1e-6);
        assert_eq!(p.initial_sup(), 4.0);
        assert_eq!(p.lagrangians().infimum(), -0.5);
        assert_eq!(p.lagrangians().rest_cost_sup(), 0.5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = reference();
        assert!(p.with_initial(vec![crate::expr::Expr::parse("x").unwrap()]).is_err());
        assert!(p.with_initial(vec![crate::expr::Expr::parse("y").unwrap(); 2]).is_err());
    }
}
