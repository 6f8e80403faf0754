//! Weakly coupled Hamilton–Jacobi systems `∂_t u_i + H_i(x, D_x u_i) + (Bu)_i = 0`:
//! grid solvers, the switching Markov chain generated by `-B`, per-path
//! dynamic programming for minimizing random curves, and a verification
//! harness for the structural identities and inequalities of the system.

// NaN-rejecting checks are written as negated comparisons on purpose, and
// stencil loops read better with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod coupling;
pub mod expr;
pub mod grid;
pub mod markov;
pub mod models;
pub mod path_opt;
pub mod pde;
pub mod random_min;
pub mod run;
pub mod verify;
