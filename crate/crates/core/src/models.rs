//! Hamiltonian and Lagrangian families.
//!
//! Members are either `½|p|² + V(x)` with `V` a finite sum of cosines, or a
//! one-dimensional table of `H(x, p)` values on a rectangular grid with
//! bilinear interpolation. Lagrangians are the Legendre transforms
//! `L(x, q) = sup_p <p, q> - H(x, p)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::CouplingMatrix;
use crate::grid::{dot, norm, Point};
use crate::pde::{GridField, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("|q| = {speed} exceeds the velocity truncation {q_max}")]
    VelocityOutOfRange { speed: f64, q_max: f64 },
    #[error("tabulated model is not differentiable at x = {x}, p = {p} (too close to the table edge)")]
    NotDifferentiableModel { x: f64, p: f64 },
    #[error("member {member}: coercivity violated at |p| = {radius}: {detail}")]
    CoercivityViolated { member: usize, radius: f64, detail: String },
    #[error("member {member}: not convex in p at x = {x}, p = {p} (second difference {value})")]
    ConvexityViolated { member: usize, x: f64, p: f64, value: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error(transparent)]
    Field(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMode {
    pub amplitude: f64,
    pub frequency: Point,
    pub phase: f64,
}

/// `V(x) = Σ a_k cos(<k, x> + φ_k)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CosinePotential {
    pub modes: Vec<CosineMode>,
}

impl CosinePotential {
    pub fn new(modes: Vec<CosineMode>) -> Self {
        Self { modes }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// One mode `a cos(k x + φ)` in one dimension.
    pub fn single(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self { modes: vec![CosineMode { amplitude, frequency: [frequency, 0.0], phase }] }
    }

    #[inline]
    pub fn value(&self, x: Point) -> f64 {
        self.modes.iter().map(|m| m.amplitude * (dot(m.frequency, x) + m.phase).cos()).sum()
    }

    #[inline]
    pub fn gradient(&self, x: Point) -> Point {
        let mut g = [0.0; 2];
        for m in &self.modes {
            let s = -m.amplitude * (dot(m.frequency, x) + m.phase).sin();
            g[0] += s * m.frequency[0];
            g[1] += s * m.frequency[1];
        }
        g
    }

    /// `Σ |a_k|`, a bound on `|V|`.
    pub fn sup_abs(&self) -> f64 {
        self.modes.iter().map(|m| m.amplitude.abs()).sum()
    }

    /// `Σ |a_k| |k|`, a bound on `|∇V|`.
    pub fn gradient_bound(&self) -> f64 {
        self.modes.iter().map(|m| m.amplitude.abs() * norm(m.frequency)).sum()
    }

    /// `Σ |a_k| |k|²`, a bound on the Hessian of `V`.
    pub fn curvature_bound(&self) -> f64 {
        self.modes.iter().map(|m| m.amplitude.abs() * dot(m.frequency, m.frequency)).sum()
    }
}

/// `H(x, p)` tabulated on a rectangular `(x, p)` grid in one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedHamiltonian {
    xs: Vec<f64>,
    ps: Vec<f64>,
    values: Vec<f64>,
}

fn bracket(grid: &[f64], v: f64) -> (usize, f64) {
    let n = grid.len();
    if v <= grid[0] {
        return (0, 0.0);
    }
    if v >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let i = grid.partition_point(|&g| g <= v).saturating_sub(1).min(n - 2);
    (i, (v - grid[i]) / (grid[i + 1] - grid[i]))
}

impl TabulatedHamiltonian {
    /// Builds the table and checks midpoint convexity in `p` on every `x` row.
    pub fn new(xs: Vec<f64>, ps: Vec<f64>, values: Vec<f64>) -> Result<Self, ModelError> {
        if xs.len() < 2 || ps.len() < 3 {
            return Err(ModelError::Invalid("table needs at least 2 x nodes and 3 p nodes".into()));
        }
        if xs.windows(2).any(|w| w[0] >= w[1]) || ps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::Invalid("table axes must be strictly increasing".into()));
        }
        if values.len() != xs.len() * ps.len() || values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid("table values missing or not finite".into()));
        }
        let table = Self { xs, ps, values };
        table.check_convexity(0)?;
        Ok(table)
    }

    /// Parses CSV with header `x,p,h`; rows may come in any order but must
    /// fill the rectangular grid exactly once.
    pub fn from_csv(text: &str) -> Result<Self, ModelError> {
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if !header_seen {
                if fields != ["x", "p", "h"] {
                    return Err(ModelError::Table { line: n + 1, message: "expected header `x,p,h`".into() });
                }
                header_seen = true;
                continue;
            }
            if fields.len() != 3 {
                return Err(ModelError::Table { line: n + 1, message: "expected three columns".into() });
            }
            let mut vals = [0.0; 3];
            for (v, f) in vals.iter_mut().zip(&fields) {
                *v = f.parse().map_err(|_| ModelError::Table { line: n + 1, message: format!("bad number `{f}`") })?;
            }
            rows.push(vals);
        }
        let mut xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let mut ps: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        for axis in [&mut xs, &mut ps] {
            axis.sort_by(f64::total_cmp);
            axis.dedup();
        }
        let mut values = vec![f64::NAN; xs.len() * ps.len()];
        for r in &rows {
            let ix = xs.binary_search_by(|v| v.total_cmp(&r[0])).unwrap();
            let ip = ps.binary_search_by(|v| v.total_cmp(&r[1])).unwrap();
            let slot = &mut values[ix * ps.len() + ip];
            if !slot.is_nan() {
                return Err(ModelError::Invalid(format!("duplicate table entry at x={}, p={}", r[0], r[1])));
            }
            *slot = r[2];
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(ModelError::Invalid("table is not a full rectangular grid".into()));
        }
        Self::new(xs, ps, values)
    }

    fn check_convexity(&self, member: usize) -> Result<(), ModelError> {
        let np = self.ps.len();
        for (ix, &x) in self.xs.iter().enumerate() {
            let row = &self.values[ix * np..(ix + 1) * np];
            for k in 1..np - 1 {
                let s0 = (row[k] - row[k - 1]) / (self.ps[k] - self.ps[k - 1]);
                let s1 = (row[k + 1] - row[k]) / (self.ps[k + 1] - self.ps[k]);
                let h = 0.5 * (self.ps[k + 1] - self.ps[k - 1]);
                let value = (s1 - s0) * h;
                if value < -1e-9 {
                    return Err(ModelError::ConvexityViolated { member, x, p: self.ps[k], value });
                }
            }
        }
        Ok(())
    }

    pub fn x_nodes(&self) -> &[f64] {
        &self.xs
    }

    pub fn p_nodes(&self) -> &[f64] {
        &self.ps
    }

    #[inline]
    fn node(&self, ix: usize, ip: usize) -> f64 {
        self.values[ix * self.ps.len() + ip]
    }

    /// Value on the `p` row of `x`, linear in `x` between rows, clamped in `x`.
    fn row_value(&self, x: f64, ip: usize) -> f64 {
        let (ix, w) = bracket(&self.xs, x);
        (1.0 - w) * self.node(ix, ip) + w * self.node(ix + 1, ip)
    }

    /// Bilinear interpolation; linear extrapolation in `p` beyond the table
    /// keeps convexity, `x` is clamped.
    pub fn value(&self, x: f64, p: f64) -> f64 {
        let np = self.ps.len();
        let ip = if p <= self.ps[0] {
            0
        } else if p >= self.ps[np - 1] {
            np - 2
        } else {
            bracket(&self.ps, p).0
        };
        let w = (p - self.ps[ip]) / (self.ps[ip + 1] - self.ps[ip]);
        (1.0 - w) * self.row_value(x, ip) + w * self.row_value(x, ip + 1)
    }

    /// Largest `|∂_p H|` over `p ∈ [lo, hi]`, from the slopes of the
    /// piecewise-linear rows that meet the interval.
    pub fn slope_bound(&self, x: f64, lo: f64, hi: f64) -> f64 {
        let np = self.ps.len();
        let first = if lo <= self.ps[0] { 0 } else { bracket(&self.ps, lo).0 };
        let last = if hi >= self.ps[np - 1] { np - 2 } else { bracket(&self.ps, hi).0 };
        (first..=last.max(first))
            .map(|k| ((self.row_value(x, k + 1) - self.row_value(x, k)) / (self.ps[k + 1] - self.ps[k])).abs())
            .fold(0.0, f64::max)
    }

    /// Centered differences with the table spacing.
    pub fn gradients(&self, x: f64, p: f64) -> Result<(f64, f64), ModelError> {
        let (xs, ps) = (&self.xs, &self.ps);
        let hx = xs[1] - xs[0];
        let hp = ps[1] - ps[0];
        if x - hx < xs[0] || x + hx > xs[xs.len() - 1] || p - hp < ps[0] || p + hp > ps[ps.len() - 1] {
            return Err(ModelError::NotDifferentiableModel { x, p });
        }
        let dx = (self.value(x + hx, p) - self.value(x - hx, p)) / (2.0 * hx);
        let dp = (self.value(x, p + hp) - self.value(x, p - hp)) / (2.0 * hp);
        Ok((dx, dp))
    }

    /// `max_p p q - H(x, p)` over the `p` nodes, refined by three
    /// golden-section steps around the best node.
    pub fn conjugate(&self, x: f64, q: f64) -> f64 {
        let np = self.ps.len();
        let objective = |p: f64| p * q - self.value(x, p);
        let (mut best_k, mut best) = (0, f64::NEG_INFINITY);
        for k in 0..np {
            let v = self.ps[k] * q - self.row_value(x, k);
            if v > best {
                best = v;
                best_k = k;
            }
        }
        let mut a = self.ps[best_k.saturating_sub(1)];
        let mut b = self.ps[(best_k + 1).min(np - 1)];
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (objective(c), objective(d));
        for _ in 0..3 {
            best = best.max(fc).max(fd);
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = objective(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = objective(d);
            }
        }
        best.max(fc).max(fd)
    }
}

/// Legendre transform of a tabulated member, stored on an `(x, q)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedLagrangian {
    xs: Vec<f64>,
    qs: Vec<f64>,
    values: Vec<f64>,
}

/// Number of velocity nodes used to tabulate Lagrangians of tabulated members.
pub const LAGRANGIAN_TABLE_NODES: usize = 401;

impl TabulatedLagrangian {
    fn from_hamiltonian(h: &TabulatedHamiltonian, q_max: f64) -> Self {
        let nq = LAGRANGIAN_TABLE_NODES;
        let qs: Vec<f64> = (0..nq).map(|k| -q_max + 2.0 * q_max * k as f64 / (nq - 1) as f64).collect();
        let mut values = Vec::with_capacity(h.xs.len() * nq);
        for &x in &h.xs {
            values.extend(qs.iter().map(|&q| h.conjugate(x, q)));
        }
        Self { xs: h.xs.clone(), qs, values }
    }

    pub fn value(&self, x: f64, q: f64) -> f64 {
        let nq = self.qs.len();
        let (ix, wx) = bracket(&self.xs, x);
        let (iq, wq) = bracket(&self.qs, q);
        let at = |i: usize, k: usize| self.values[i * nq + k];
        (1.0 - wx) * ((1.0 - wq) * at(ix, iq) + wq * at(ix, iq + 1))
            + wx * ((1.0 - wq) * at(ix + 1, iq) + wq * at(ix + 1, iq + 1))
    }

    fn step_x(&self) -> f64 {
        self.xs[1] - self.xs[0]
    }

    fn step_q(&self) -> f64 {
        self.qs[1] - self.qs[0]
    }

    fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hamiltonian {
    QuadraticCosine(CosinePotential),
    Tabulated(Arc<TabulatedHamiltonian>),
}

impl Hamiltonian {
    #[inline]
    pub fn value(&self, x: Point, p: Point) -> f64 {
        match self {
            Hamiltonian::QuadraticCosine(v) => 0.5 * dot(p, p) + v.value(x),
            Hamiltonian::Tabulated(t) => t.value(x[0], p[0]),
        }
    }

    /// Largest `|∂H/∂p_axis|` for `p_axis ∈ [lo, hi]`.
    #[inline]
    pub fn axis_speed(&self, x: Point, _axis: usize, lo: f64, hi: f64) -> f64 {
        match self {
            Hamiltonian::QuadraticCosine(_) => lo.abs().max(hi.abs()),
            Hamiltonian::Tabulated(t) => t.slope_bound(x[0], lo, hi),
        }
    }

    /// `sup { |∂_p H(x, p)| : |p| <= radius }`.
    pub fn max_speed(&self, radius: f64) -> f64 {
        match self {
            Hamiltonian::QuadraticCosine(_) => radius,
            Hamiltonian::Tabulated(t) => t.xs.iter().map(|&x| t.slope_bound(x, -radius, radius)).fold(0.0, f64::max),
        }
    }

    /// `sup |∂_x H|` over the relevant range.
    pub fn spatial_gradient_bound(&self) -> f64 {
        match self {
            Hamiltonian::QuadraticCosine(v) => v.gradient_bound(),
            Hamiltonian::Tabulated(t) => {
                let np = t.ps.len();
                let mut best: f64 = 0.0;
                for ix in 0..t.xs.len() - 1 {
                    let h = t.xs[ix + 1] - t.xs[ix];
                    for ip in 0..np {
                        best = best.max(((t.node(ix + 1, ip) - t.node(ix, ip)) / h).abs());
                    }
                }
                best
            }
        }
    }

    pub fn potential(&self) -> Option<&CosinePotential> {
        match self {
            Hamiltonian::QuadraticCosine(v) => Some(v),
            Hamiltonian::Tabulated(_) => None,
        }
    }
}

/// `(∂_x H, ∂_p H)`; analytic for the quadratic family, centered differences
/// for tables.
pub fn hamiltonian_gradients(h: &Hamiltonian, x: Point, p: Point) -> Result<(Point, Point), ModelError> {
    match h {
        Hamiltonian::QuadraticCosine(v) => Ok((v.gradient(x), p)),
        Hamiltonian::Tabulated(t) => {
            let (dx, dp) = t.gradients(x[0], p[0])?;
            Ok(([dx, 0.0], [dp, 0.0]))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lagrangian {
    QuadraticCosine(CosinePotential),
    Tabulated(Arc<TabulatedLagrangian>),
}

impl Lagrangian {
    /// `L(x, q)`; tables are clamped at the velocity truncation.
    #[inline]
    pub fn value(&self, x: Point, q: Point) -> f64 {
        match self {
            Lagrangian::QuadraticCosine(v) => 0.5 * dot(q, q) - v.value(x),
            Lagrangian::Tabulated(t) => t.value(x[0], q[0]),
        }
    }

    /// `∂_q L(x, q)`.
    pub fn grad_q(&self, x: Point, q: Point) -> Result<Point, ModelError> {
        match self {
            Lagrangian::QuadraticCosine(_) => Ok(q),
            Lagrangian::Tabulated(t) => {
                let h = t.step_q();
                if q[0] - h < t.qs[0] || q[0] + h > t.qs[t.qs.len() - 1] {
                    return Err(ModelError::NotDifferentiableModel { x: x[0], p: q[0] });
                }
                Ok([(t.value(x[0], q[0] + h) - t.value(x[0], q[0] - h)) / (2.0 * h), 0.0])
            }
        }
    }

    /// `∂_x L(x, q)`.
    pub fn grad_x(&self, x: Point, q: Point) -> Result<Point, ModelError> {
        match self {
            Lagrangian::QuadraticCosine(v) => {
                let g = v.gradient(x);
                Ok([-g[0], -g[1]])
            }
            Lagrangian::Tabulated(t) => {
                let h = t.step_x();
                if x[0] - h < t.xs[0] || x[0] + h > t.xs[t.xs.len() - 1] {
                    return Err(ModelError::NotDifferentiableModel { x: x[0], p: q[0] });
                }
                Ok([(t.value(x[0] + h, q[0]) - t.value(x[0] - h, q[0])) / (2.0 * h), 0.0])
            }
        }
    }

    pub fn potential(&self) -> Option<&CosinePotential> {
        match self {
            Lagrangian::QuadraticCosine(v) => Some(v),
            Lagrangian::Tabulated(_) => None,
        }
    }

    /// A lower bound for `inf L`.
    pub fn infimum(&self) -> f64 {
        match self {
            Lagrangian::QuadraticCosine(v) => -v.sup_abs(),
            Lagrangian::Tabulated(t) => t.min_value(),
        }
    }

    /// An upper bound for `sup_x L(x, 0)`.
    pub fn rest_cost_sup(&self) -> f64 {
        match self {
            Lagrangian::QuadraticCosine(v) => v.sup_abs(),
            Lagrangian::Tabulated(t) => t.xs.iter().map(|&x| t.value(x, 0.0)).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Legendre transform `sup_p <p, q> - H(x, p)` of one member.
pub fn legendre(h: &Hamiltonian, x: Point, q: Point, q_max: f64) -> Result<f64, ModelError> {
    let speed = norm(q);
    if speed > q_max * (1.0 + 1e-12) {
        return Err(ModelError::VelocityOutOfRange { speed, q_max });
    }
    Ok(match h {
        Hamiltonian::QuadraticCosine(v) => 0.5 * dot(q, q) - v.value(x),
        Hamiltonian::Tabulated(t) => t.conjugate(x[0], q[0]),
    })
}

/// `L_j(x, q) - (B u(t, x))_j` with `u` interpolated from a grid field.
pub fn effective_lagrangian(
    l: &Lagrangian,
    j: usize,
    u: &GridField,
    b: &CouplingMatrix,
    t: f64,
    x: Point,
    q: Point,
) -> Result<f64, ModelError> {
    let values = u.evaluate_all(t, x)?;
    Ok(l.value(x, q) - b.apply_row(j, &values))
}

/// Superlinear envelope `r -> quadratic·r² + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub quadratic: f64,
    pub offset: f64,
}

impl Envelope {
    pub fn at(&self, r: f64) -> f64 {
        self.quadratic * r * r + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShellWitness {
    pub member: usize,
    pub radius: f64,
    pub min: f64,
    pub max: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub alpha: Vec<Envelope>,
    pub beta: Vec<Envelope>,
    pub shells: Vec<ShellWitness>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianFamily {
    dim: usize,
    members: Vec<Hamiltonian>,
}

impl HamiltonianFamily {
    pub fn new(dim: usize, members: Vec<Hamiltonian>) -> Result<Self, ModelError> {
        if dim != 1 && dim != 2 {
            return Err(ModelError::Invalid(format!("spatial dimension {dim} is not supported")));
        }
        if members.is_empty() {
            return Err(ModelError::Invalid("family has no members".into()));
        }
        for (i, h) in members.iter().enumerate() {
            match h {
                Hamiltonian::Tabulated(t) => {
                    if dim != 1 {
                        return Err(ModelError::Invalid("tabulated members are one-dimensional".into()));
                    }
                    t.check_convexity(i)?;
                }
                Hamiltonian::QuadraticCosine(v) => {
                    for m in &v.modes {
                        if !(m.amplitude.is_finite() && m.phase.is_finite())
                            || !m.frequency.iter().all(|f| f.is_finite())
                        {
                            return Err(ModelError::Invalid(format!("member {i}: non-finite cosine mode")));
                        }
                        if dim == 1 && m.frequency[1] != 0.0 {
                            return Err(ModelError::Invalid(format!("member {i}: y frequency in one dimension")));
                        }
                    }
                }
            }
        }
        Ok(Self { dim, members })
    }

    /// One-dimensional quadratic family `½p² + a_i cos(k_i x + φ_i)`.
    pub fn quadratic_cosine(amplitudes: &[f64], frequencies: &[f64], phases: &[f64]) -> Result<Self, ModelError> {
        if amplitudes.len() != frequencies.len() || amplitudes.len() != phases.len() {
            return Err(ModelError::Invalid("amplitudes, frequencies and phases differ in length".into()));
        }
        let members = amplitudes
            .iter()
            .zip(frequencies)
            .zip(phases)
            .map(|((&a, &k), &p)| Hamiltonian::QuadraticCosine(CosinePotential::single(a, k, p)))
            .collect();
        Self::new(1, members)
    }

    /// `m` copies of `½|p|²`.
    pub fn free(dim: usize, m: usize) -> Self {
        Self::new(dim, vec![Hamiltonian::QuadraticCosine(CosinePotential::zero()); m]).expect("valid free family")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, i: usize) -> &Hamiltonian {
        &self.members[i]
    }

    pub fn members(&self) -> &[Hamiltonian] {
        &self.members
    }

    pub fn is_quadratic(&self) -> bool {
        self.members.iter().all(|h| matches!(h, Hamiltonian::QuadraticCosine(_)))
    }

    pub fn max_speed(&self, radius: f64) -> f64 {
        self.members.iter().map(|h| h.max_speed(radius)).fold(0.0, f64::max)
    }

    pub fn spatial_gradient_bound(&self) -> f64 {
        self.members.iter().map(Hamiltonian::spatial_gradient_bound).fold(0.0, f64::max)
    }

    /// Lagrangians with velocity truncation `q_max`.
    pub fn lagrangians(&self, q_max: f64) -> LagrangianFamily {
        let members = self
            .members
            .iter()
            .map(|h| match h {
                Hamiltonian::QuadraticCosine(v) => Lagrangian::QuadraticCosine(v.clone()),
                Hamiltonian::Tabulated(t) => {
                    Lagrangian::Tabulated(Arc::new(TabulatedLagrangian::from_hamiltonian(t, q_max)))
                }
            })
            .collect();
        LagrangianFamily { dim: self.dim, members, q_max }
    }

    fn envelopes(&self, i: usize) -> Result<(Envelope, Envelope), ModelError> {
        match &self.members[i] {
            Hamiltonian::QuadraticCosine(v) => {
                let vm = v.sup_abs();
                Ok((Envelope { quadratic: 0.5, offset: -vm }, Envelope { quadratic: 0.5, offset: vm }))
            }
            Hamiltonian::Tabulated(t) => {
                // Curvature bounds from second divided differences in p, then
                // the tightest offsets that make both envelopes valid on the table.
                let np = t.ps.len();
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for ix in 0..t.xs.len() {
                    for k in 1..np - 1 {
                        let s0 = (t.node(ix, k) - t.node(ix, k - 1)) / (t.ps[k] - t.ps[k - 1]);
                        let s1 = (t.node(ix, k + 1) - t.node(ix, k)) / (t.ps[k + 1] - t.ps[k]);
                        let c = (s1 - s0) / (t.ps[k + 1] - t.ps[k - 1]);
                        lo = lo.min(c);
                        hi = hi.max(c);
                    }
                }
                if lo <= 0.0 {
                    return Err(ModelError::CoercivityViolated {
                        member: i,
                        radius: f64::NAN,
                        detail: "no superlinear lower envelope: the table is affine somewhere in p".into(),
                    });
                }
                let (mut a_off, mut b_off) = (f64::INFINITY, f64::NEG_INFINITY);
                for ix in 0..t.xs.len() {
                    for (k, &p) in t.ps.iter().enumerate() {
                        a_off = a_off.min(t.node(ix, k) - lo * p * p);
                        b_off = b_off.max(t.node(ix, k) - hi * p * p);
                    }
                }
                Ok((Envelope { quadratic: lo, offset: a_off }, Envelope { quadratic: hi, offset: b_off }))
            }
        }
    }

    /// Samples `H` on shells `|p| = r` and checks `α(r) <= min <= max <= β(r)`.
    pub fn coercivity_report(&self) -> Result<CoercivityReport, ModelError> {
        let mut report = CoercivityReport { alpha: Vec::new(), beta: Vec::new(), shells: Vec::new() };
        for (i, h) in self.members.iter().enumerate() {
            let (alpha, beta) = self.envelopes(i)?;
            report.alpha.push(alpha);
            report.beta.push(beta);
            let (xs, radii): (Vec<Point>, Vec<f64>) = match h {
                Hamiltonian::QuadraticCosine(_) => {
                    let span = 2.0 * std::f64::consts::PI;
                    let n = if self.dim == 1 { 64 } else { 16 };
                    let axis: Vec<f64> = (0..n).map(|k| -span + 2.0 * span * k as f64 / n as f64).collect();
                    let xs = if self.dim == 1 {
                        axis.iter().map(|&x| [x, 0.0]).collect()
                    } else {
                        axis.iter().flat_map(|&x| axis.iter().map(move |&y| [x, y])).collect()
                    };
                    (xs, vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0])
                }
                Hamiltonian::Tabulated(t) => {
                    let rmax = t.ps[0].abs().min(t.ps[t.ps.len() - 1].abs());
                    (t.xs.iter().map(|&x| [x, 0.0]).collect(), (0..=8).map(|k| rmax * k as f64 / 8.0).collect())
                }
            };
            let directions: Vec<Point> = if self.dim == 1 {
                vec![[1.0, 0.0], [-1.0, 0.0]]
            } else {
                (0..16)
                    .map(|k| {
                        let a = k as f64 * std::f64::consts::PI / 8.0;
                        [a.cos(), a.sin()]
                    })
                    .collect()
            };
            for &r in &radii {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &x in &xs {
                    for d in &directions {
                        let v = h.value(x, [r * d[0], r * d[1]]);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let w = ShellWitness { member: i, radius: r, min: lo, max: hi, alpha: alpha.at(r), beta: beta.at(r) };
                let slack = 1e-9 * (1.0 + r * r);
                if w.alpha > lo + slack || hi > w.beta + slack {
                    return Err(ModelError::CoercivityViolated {
                        member: i,
                        radius: r,
                        detail: format!("envelopes [{}, {}] do not bracket [{lo}, {hi}]", w.alpha, w.beta),
                    });
                }
                report.shells.push(w);
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianFamily {
    dim: usize,
    members: Vec<Lagrangian>,
    q_max: f64,
}

impl LagrangianFamily {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, i: usize) -> &Lagrangian {
        &self.members[i]
    }

    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    pub fn is_quadratic(&self) -> bool {
        self.members.iter().all(|l| matches!(l, Lagrangian::QuadraticCosine(_)))
    }

    /// `μ = inf_i inf L_i` (a valid lower bound).
    pub fn infimum(&self) -> f64 {
        self.members.iter().map(Lagrangian::infimum).fold(f64::INFINITY, f64::min)
    }

    /// `M = sup_i sup_x L_i(x, 0)` (a valid upper bound).
    pub fn rest_cost_sup(&self) -> f64 {
        self.members.iter().map(Lagrangian::rest_cost_sup).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sampled constant `C` with `L(z + h) + L(z - h) - 2L(z) <= 2C|h|²` for
    /// `z = (x, q)` with `|x| <= x_radius`, `|q| <= q_radius`.
    pub fn semiconcavity_constant(&self, x_radius: f64, q_radius: f64) -> f64 {
        let steps = [0.05, 0.1, 0.2];
        let nx = 41;
        let nq = 21;
        let angles = 12;
        let mut best: f64 = 0.0;
        for l in &self.members {
            for ix in 0..nx {
                let x0 = -x_radius + 2.0 * x_radius * ix as f64 / (nx - 1) as f64;
                for iq in 0..nq {
                    let q0 = -q_radius + 2.0 * q_radius * iq as f64 / (nq - 1) as f64;
                    for a in 0..angles {
                        let th = a as f64 * std::f64::consts::PI / angles as f64;
                        for &s in &steps {
                            let (hx, hq) = (s * th.cos(), s * th.sin());
                            let f = |dx: f64, dq: f64| l.value([x0 + dx, 0.0], [q0 + dq, 0.0]);
                            let second = f(hx, hq) + f(-hx, -hq) - 2.0 * f(0.0, 0.0);
                            best = best.max(second / (2.0 * s * s));
                        }
                    }
                }
            }
        }
        best
    }
}
