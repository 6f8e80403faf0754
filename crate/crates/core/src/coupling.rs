//! Coupling matrices `B` with nonpositive off-diagonal entries and zero row
//! sums, and the stochastic semigroup `t -> exp(-tB)` they generate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on raw row sums accepted by [`CouplingMatrix::validate`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;
/// Largest negative entry of `exp(-tB)` that is treated as rounding noise.
pub const CLAMP_LIMIT: f64 = 1e-8;

const TAYLOR_ORDER: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("coupling matrix is empty")]
    Empty,
    #[error("coupling matrix is not square: row {row} has {len} entries, expected {m}")]
    NotSquare { row: usize, len: usize, m: usize },
    #[error("coupling entry ({row},{col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("off-diagonal coupling entry ({row},{col}) = {value} is positive")]
    OffDiagonalPositive { row: usize, col: usize, value: f64 },
    #[error("row {row} of the coupling matrix sums to {sum}, not 0")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("transition matrix entry ({row},{col}) = {value} is negative beyond rounding")]
    ClampExceeded { row: usize, col: usize, value: f64 },
}

/// Dense row-major `m x m` matrix satisfying `b_ij <= 0` for `j != i` and
/// exact zero row sums.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl CouplingMatrix {
    /// Checks sign and row-sum conditions and rewrites each diagonal entry
    /// as minus the sum of its off-diagonal row entries.
    pub fn validate(rows: &[Vec<f64>]) -> Result<Self, CouplingError> {
        let m = rows.len();
        if m == 0 {
            return Err(CouplingError::Empty);
        }
        let mut entries = Vec::with_capacity(m * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(CouplingError::NotSquare { row: i, len: row.len(), m });
            }
            for (j, &b) in row.iter().enumerate() {
                if !b.is_finite() {
                    return Err(CouplingError::NonFinite { row: i, col: j });
                }
                if j != i && b > 0.0 {
                    return Err(CouplingError::OffDiagonalPositive { row: i, col: j, value: b });
                }
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > ROW_SUM_TOLERANCE {
                return Err(CouplingError::RowSumNonzero { row: i, sum });
            }
            let off: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, b)| b).sum();
            entries.extend(row.iter().enumerate().map(|(j, &b)| if j == i { -off } else { b }));
        }
        Ok(Self { m, entries })
    }

    /// The zero coupling on `m` equations.
    pub fn zero(m: usize) -> Self {
        assert!(m >= 1, "need at least one equation");
        Self { m, entries: vec![0.0; m * m] }
    }

    /// Two-state generator `[[r, -r], [-r, r]]`.
    pub fn symmetric_two_state(rate: f64) -> Result<Self, CouplingError> {
        Self::validate(&[vec![rate, -rate], vec![-rate, rate]])
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i).to_vec()).collect()
    }

    /// Largest total jump rate `max_i b_ii`.
    pub fn max_rate(&self) -> f64 {
        (0..self.m).map(|i| self.entry(i, i)).fold(0.0, f64::max)
    }

    /// Largest absolute entry.
    pub fn max_abs_entry(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, b| acc.max(b.abs()))
    }

    /// `‖B‖_∞`, the maximal absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.m).map(|i| self.row(i).iter().map(|b| b.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&b| b == 0.0)
    }

    /// `(Bu)_i = sum_j b_ij u_j`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(u.len(), self.m);
        (0..self.m).map(|i| self.apply_row(i, u)).collect()
    }

    /// Single component `(Bu)_i`.
    #[inline]
    pub fn apply_row(&self, i: usize, u: &[f64]) -> f64 {
        self.row(i).iter().zip(u).map(|(b, v)| b * v).sum()
    }

    /// `exp(-tB)` by scaling and squaring of the degree-12 Taylor polynomial.
    pub fn transition_matrix(&self, t: f64) -> Result<StochasticMatrix, CouplingError> {
        if t < 0.0 || t.is_nan() {
            return Err(CouplingError::NegativeTime(t));
        }
        let raw = exp_scaled(self.m, &self.entries, -t);
        StochasticMatrix::from_raw(self.m, raw)
    }

    /// `exp(-tB) v`.
    pub fn push_vector(&self, t: f64, v: &[f64]) -> Result<Vec<f64>, CouplingError> {
        if v.len() != self.m {
            return Err(CouplingError::DimensionMismatch { expected: self.m, got: v.len() });
        }
        Ok(self.transition_matrix(t)?.apply(v))
    }

    /// `exp(+tB)` without any stochastic normalization. Only meaningful as a
    /// deliberately wrong propagator in mutation tests.
    pub fn reversed_propagator(&self, t: f64) -> Vec<f64> {
        exp_scaled(self.m, &self.entries, t)
    }
}

/// Free-function form of [`CouplingMatrix::apply`].
pub fn apply_coupling(b: &CouplingMatrix, u: &[f64]) -> Vec<f64> {
    b.apply(u)
}

/// Free-function form of [`CouplingMatrix::transition_matrix`].
pub fn transition_matrix(b: &CouplingMatrix, t: f64) -> Result<StochasticMatrix, CouplingError> {
    b.transition_matrix(t)
}

/// Free-function form of [`CouplingMatrix::push_vector`].
pub fn push_vector(b: &CouplingMatrix, t: f64, v: &[f64]) -> Result<Vec<f64>, CouplingError> {
    b.push_vector(t, v)
}

fn mat_mul(m: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    out
}

fn norm_inf(m: usize, a: &[f64]) -> f64 {
    (0..m).map(|i| a[i * m..(i + 1) * m].iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `exp(scale * A)` for a dense `m x m` matrix `A`.
fn exp_scaled(m: usize, a: &[f64], scale: f64) -> Vec<f64> {
    let mut x: Vec<f64> = a.iter().map(|v| v * scale).collect();
    let norm = norm_inf(m, &x);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
        let factor = 0.5f64.powi(squarings as i32);
        x.iter_mut().for_each(|v| *v *= factor);
    }
    let mut identity = vec![0.0; m * m];
    for i in 0..m {
        identity[i * m + i] = 1.0;
    }
    // Horner: I + X(I + X/2(I + X/3(...)))
    let mut acc = identity.clone();
    for k in (1..=TAYLOR_ORDER).rev() {
        let mut next = mat_mul(m, &x, &acc);
        next.iter_mut().for_each(|v| *v /= k as f64);
        for (n, id) in next.iter_mut().zip(&identity) {
            *n += id;
        }
        acc = next;
    }
    for _ in 0..squarings {
        acc = mat_mul(m, &acc, &acc);
    }
    acc
}

/// Row-stochastic `m x m` matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl StochasticMatrix {
    fn from_raw(m: usize, mut entries: Vec<f64>) -> Result<Self, CouplingError> {
        for i in 0..m {
            let row = &mut entries[i * m..(i + 1) * m];
            let mut clamped = false;
            for (j, v) in row.iter_mut().enumerate() {
                if *v < 0.0 {
                    if *v < -CLAMP_LIMIT {
                        return Err(CouplingError::ClampExceeded { row: i, col: j, value: *v });
                    }
                    *v = 0.0;
                    clamped = true;
                }
            }
            let sum: f64 = row.iter().sum();
            if clamped || (sum - 1.0).abs() > 1e-13 {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Ok(Self { m, entries })
    }

    pub fn identity(m: usize) -> Self {
        let mut entries = vec![0.0; m * m];
        for i in 0..m {
            entries[i * m + i] = 1.0;
        }
        Self { m, entries }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> ProbabilityVector {
        ProbabilityVector(self.entries[i * self.m..(i + 1) * self.m].to_vec())
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.entries[i * self.m..(i + 1) * self.m]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.m).map(|i| self.apply_row(i, v)).collect()
    }

    #[inline]
    pub fn apply_row(&self, i: usize, v: &[f64]) -> f64 {
        self.row_slice(i).iter().zip(v).map(|(p, x)| p * x).sum()
    }

    pub fn mul(&self, other: &StochasticMatrix) -> StochasticMatrix {
        assert_eq!(self.m, other.m);
        StochasticMatrix { m: self.m, entries: mat_mul(self.m, &self.entries, &other.entries) }
    }

    /// Maximal absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &StochasticMatrix) -> f64 {
        self.entries.iter().zip(&other.entries).fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

/// Nonnegative vector summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(pub Vec<f64>);

impl ProbabilityVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}
