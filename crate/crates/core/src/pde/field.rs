use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use super::SolverError;
use crate::grid::{Point, SpatialGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    FiniteDifference,
    SemiLagrangian,
    ClosedForm,
}

impl SchemeKind {
    pub fn tag(self) -> &'static str {
        match self {
            SchemeKind::FiniteDifference => "fd",
            SchemeKind::SemiLagrangian => "sl",
            SchemeKind::ClosedForm => "closed_form",
        }
    }
}

impl FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fd" => Ok(SchemeKind::FiniteDifference),
            "sl" => Ok(SchemeKind::SemiLagrangian),
            "closed_form" => Ok(SchemeKind::ClosedForm),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}

/// Resolution and stability data recorded with a field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldMeta {
    pub scheme: SchemeKind,
    pub dx: f64,
    pub dt: f64,
    /// CFL bound on the step; only finite-difference fields carry one.
    pub cfl_bound: Option<f64>,
    pub q_max: f64,
    pub lipschitz: f64,
}

/// Values `u_i(t_k, x)` on a uniform spatial grid and an increasing list of
/// times, stored time-major, then node-major, then by component.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: SpatialGrid,
    times: Vec<f64>,
    m: usize,
    data: Vec<f64>,
    meta: FieldMeta,
}

impl GridField {
    pub(crate) fn new(grid: SpatialGrid, m: usize, meta: FieldMeta, t0: f64, initial: Vec<f64>) -> Self {
        assert_eq!(initial.len(), grid.len() * m);
        Self { grid, times: vec![t0], m, data: initial, meta }
    }

    pub(crate) fn push_slice(&mut self, t: f64, values: &[f64]) {
        assert_eq!(values.len(), self.grid.len() * self.m);
        assert!(t > *self.times.last().unwrap());
        self.times.push(t);
        self.data.extend_from_slice(values);
    }

    /// Field sampled from a closed-form function `f(t, x) -> (u_1, ..., u_m)`.
    pub fn from_fn(
        grid: SpatialGrid,
        times: Vec<f64>,
        m: usize,
        lipschitz: f64,
        f: impl Fn(f64, Point) -> Vec<f64>,
    ) -> Self {
        assert!(!times.is_empty() && times.windows(2).all(|w| w[0] < w[1]));
        let mut data = Vec::with_capacity(times.len() * grid.len() * m);
        for &t in &times {
            for k in 0..grid.len() {
                let v = f(t, grid.node(k));
                assert_eq!(v.len(), m);
                data.extend(v);
            }
        }
        let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
        let meta =
            FieldMeta { scheme: SchemeKind::ClosedForm, dx: grid.dx(), dt, cfl_bound: None, q_max: 0.0, lipschitz };
        Self { grid, times, m, data, meta }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Values at time level `k`, node-major.
    pub fn slice(&self, k: usize) -> &[f64] {
        let len = self.grid.len() * self.m;
        &self.data[k * len..(k + 1) * len]
    }

    pub fn last_slice(&self) -> &[f64] {
        self.slice(self.times.len() - 1)
    }

    #[inline]
    pub fn node_value(&self, k: usize, node: usize, i: usize) -> f64 {
        self.data[(k * self.grid.len() + node) * self.m + i]
    }

    /// Index of the level at time `t`, if `t` is (numerically) one of the stored times.
    pub fn level_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * (1.0 + self.end_time().abs());
        let k = self.times.partition_point(|&s| s < t - tol);
        (k < self.times.len() && (self.times[k] - t).abs() <= tol).then_some(k)
    }

    fn time_bracket(&self, t: f64) -> Option<(usize, f64)> {
        let tol = 1e-12 * (1.0 + self.end_time().abs());
        if t < self.times[0] - tol || t > self.end_time() + tol || t.is_nan() {
            return None;
        }
        if self.times.len() == 1 {
            return Some((0, 0.0));
        }
        let n = self.times.len();
        let k = self.times.partition_point(|&s| s <= t).clamp(1, n - 1) - 1;
        let w = ((t - self.times[k]) / (self.times[k + 1] - self.times[k])).clamp(0.0, 1.0);
        Some((k, w))
    }

    /// Interpolated value, clamped in time and space (constant extension).
    pub fn sample(&self, t: f64, x: Point, i: usize) -> f64 {
        let t = t.clamp(self.times[0], self.end_time());
        let (k, w) = self.time_bracket(t).expect("clamped time");
        let st = self.grid.stencil(x);
        let at = |level: usize| st.apply(|node| self.node_value(level, node, i));
        if w == 0.0 {
            at(k)
        } else if w == 1.0 {
            at(k + 1)
        } else {
            (1.0 - w) * at(k) + w * at(k + 1)
        }
    }

    /// Bilinear-in-space, linear-in-time interpolation inside the domain.
    pub fn evaluate(&self, t: f64, x: Point, i: usize) -> Result<f64, SolverError> {
        if i >= self.m || self.time_bracket(t).is_none() || !self.grid.contains(x) {
            return Err(SolverError::OutOfDomain { t, x });
        }
        Ok(self.sample(t, x, i))
    }

    /// All components at `(t, x)`.
    pub fn evaluate_all(&self, t: f64, x: Point) -> Result<Vec<f64>, SolverError> {
        (0..self.m).map(|i| self.evaluate(t, x, i)).collect()
    }

    /// Centered-difference gradient with the grid spacing.
    pub fn gradient(&self, t: f64, x: Point, i: usize) -> Point {
        let h = self.grid.dx();
        let mut g = [0.0; 2];
        for (a, ga) in g.iter_mut().enumerate().take(self.grid.dim()) {
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            *ga = (self.sample(t, xp, i) - self.sample(t, xm, i)) / (2.0 * h);
        }
        g
    }

    /// `u(x + h e_a) + u(x - h e_a) - 2u(x)` with `h` the grid spacing.
    pub fn second_difference(&self, t: f64, x: Point, i: usize, axis: usize) -> f64 {
        let h = self.grid.dx();
        let mut xp = x;
        let mut xm = x;
        xp[axis] += h;
        xm[axis] -= h;
        self.sample(t, xp, i) + self.sample(t, xm, i) - 2.0 * self.sample(t, x, i)
    }

    /// Sup-norm distance between the last slices of two fields on the same grid,
    /// restricted to nodes with `|x|_∞ <= radius`.
    pub fn final_distance(&self, other: &GridField, radius: f64) -> f64 {
        assert_eq!(self.grid, other.grid);
        let (a, b) = (self.last_slice(), other.last_slice());
        let mut d: f64 = 0.0;
        for k in 0..self.grid.len() {
            let p = self.grid.node(k);
            if p[0].abs().max(p[1].abs()) > radius + 1e-12 {
                continue;
            }
            for i in 0..self.m {
                d = d.max((a[k * self.m + i] - b[k * self.m + i]).abs());
            }
        }
        d
    }

    /// CSV with a metadata comment line and columns `t,x[,y],i,u`.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 24);
        let m = &self.meta;
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let _ = writeln!(
            s,
            "# scheme={} dim={} m={} half_width={} dx={} dt={} cfl_bound={} q_max={} lipschitz={} levels={}",
            m.scheme.tag(),
            self.grid.dim(),
            self.m,
            self.grid.half_width(),
            self.grid.dx(),
            m.dt,
            opt(m.cfl_bound),
            m.q_max,
            m.lipschitz,
            self.times.len()
        );
        s.push_str(if self.grid.dim() == 1 { "t,x,i,u\n" } else { "t,x,y,i,u\n" });
        for (k, &t) in self.times.iter().enumerate() {
            for node in 0..self.grid.len() {
                let p = self.grid.node(node);
                for i in 0..self.m {
                    let u = self.node_value(k, node, i);
                    if self.grid.dim() == 1 {
                        let _ = writeln!(s, "{t},{},{i},{u}", p[0]);
                    } else {
                        let _ = writeln!(s, "{t},{},{},{i},{u}", p[0], p[1]);
                    }
                }
            }
        }
        s
    }

    /// Parses the output of [`GridField::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, SolverError> {
        let bad = |msg: String| SolverError::Format(msg);
        let mut lines = text.lines();
        let meta_line = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let meta_line = meta_line.strip_prefix('#').ok_or_else(|| bad("missing metadata line".into()))?;
        let mut kv = std::collections::HashMap::new();
        for item in meta_line.split_whitespace() {
            let (k, v) = item.split_once('=').ok_or_else(|| bad(format!("bad metadata item `{item}`")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("metadata lacks `{k}`")));
        let num = |k: &str| -> Result<f64, SolverError> {
            get(k)?.parse::<f64>().map_err(|_| bad(format!("metadata `{k}` is not a number")))
        };
        let int = |k: &str| -> Result<usize, SolverError> {
            get(k)?.parse::<usize>().map_err(|_| bad(format!("metadata `{k}` is not an integer")))
        };
        let scheme: SchemeKind = get("scheme")?.parse().map_err(bad)?;
        let dim = int("dim")?;
        let m = int("m")?;
        let levels = int("levels")?;
        let grid = SpatialGrid::new(dim, num("half_width")?, num("dx")?)?;
        let cfl_bound = match get("cfl_bound")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| bad("cfl_bound is not a number".into()))?),
        };
        let meta = FieldMeta {
            scheme,
            dx: grid.dx(),
            dt: num("dt")?,
            cfl_bound,
            q_max: num("q_max")?,
            lipschitz: num("lipschitz")?,
        };
        let header = lines.next().ok_or_else(|| bad("missing column header".into()))?;
        let expected = if dim == 1 { "t,x,i,u" } else { "t,x,y,i,u" };
        if header.trim() != expected {
            return Err(bad(format!("expected header `{expected}`")));
        }
        let per_level = grid.len() * m;
        let mut times = Vec::with_capacity(levels);
        let mut data = Vec::with_capacity(levels * per_level);
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 3 {
                return Err(bad(format!("row {}: expected {} columns", n + 3, dim + 3)));
            }
            let row = data.len();
            let t: f64 = fields[0].parse().map_err(|_| bad(format!("row {}: bad time", n + 3)))?;
            if row % per_level == 0 {
                times.push(t);
            }
            let u: f64 = fields[dim + 2].parse().map_err(|_| bad(format!("row {}: bad value", n + 3)))?;
            data.push(u);
        }
        if times.len() != levels || data.len() != levels * per_level {
            return Err(bad(format!("expected {levels} levels of {per_level} values, found {}", data.len())));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("times are not increasing".into()));
        }
        Ok(Self { grid, times, m, data, meta })
    }
}

/// Free-function form of [`GridField::evaluate`].
pub fn evaluate(field: &GridField, t: f64, x: Point, i: usize) -> Result<f64, SolverError> {
    field.evaluate(t, x, i)
}
