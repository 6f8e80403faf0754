use serde::Serialize;

use super::{GridField, ProblemInstance, SolverError};
use crate::grid::Point;

/// Smallest slacks of `(-‖u⁰‖ + tμ) <= u(t) <= exp(-tB) u⁰ + tM` over all
/// nodes and levels, with the places where they are attained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub mu: f64,
    pub big_m: f64,
    pub tolerance: f64,
    pub lower_slack: f64,
    pub lower_witness: (f64, Point, usize),
    pub upper_slack: f64,
    pub upper_witness: (f64, Point, usize),
}

/// Checks the a-priori bounds with the default tolerance `(Δx + Δt)(1 + κ)`.
pub fn apriori_bounds_check(field: &GridField, problem: &ProblemInstance) -> Result<BoundsReport, SolverError> {
    let meta = field.meta();
    let tolerance = (meta.dx + meta.dt) * (1.0 + problem.lipschitz());
    apriori_bounds_check_with(field, problem, tolerance)
}

/// Checks the a-priori bounds against the field's own initial slice.
pub fn apriori_bounds_check_with(
    field: &GridField,
    problem: &ProblemInstance,
    tolerance: f64,
) -> Result<BoundsReport, SolverError> {
    let lag = problem.lagrangians();
    let (mu, big_m) = (lag.infimum(), lag.rest_cost_sup());
    let m = field.m();
    let grid = field.grid();
    let initial = field.slice(0);
    let sup0 = initial.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let t0 = field.start_time();
    let mut report = BoundsReport {
        mu,
        big_m,
        tolerance,
        lower_slack: f64::INFINITY,
        lower_witness: (t0, [0.0; 2], 0),
        upper_slack: f64::INFINITY,
        upper_witness: (t0, [0.0; 2], 0),
    };
    for (k, &t) in field.times().iter().enumerate() {
        let elapsed = t - t0;
        let transition = problem.coupling().transition_matrix(elapsed)?;
        let lower = -sup0 + elapsed * mu;
        for node in 0..grid.len() {
            let u0 = &initial[node * m..(node + 1) * m];
            for i in 0..m {
                let u = field.node_value(k, node, i);
                let lo = u - lower;
                let hi = transition.apply_row(i, u0) + elapsed * big_m - u;
                if lo < report.lower_slack {
                    report.lower_slack = lo;
                    report.lower_witness = (t, grid.node(node), i);
                }
                if hi < report.upper_slack {
                    report.upper_slack = hi;
                    report.upper_witness = (t, grid.node(node), i);
                }
            }
        }
    }
    for (slack, (t, x, component)) in
        [(report.lower_slack, report.lower_witness), (report.upper_slack, report.upper_witness)]
    {
        if slack < -tolerance {
            return Err(SolverError::BoundViolated { t, x, component, slack, tolerance });
        }
    }
    Ok(report)
}
