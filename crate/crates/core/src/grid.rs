//! Uniform spatial grids on the box `[-X, X]^N` (N = 1 or 2) with constant
//! extension outside the box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points always carry two coordinates; the second is zero in one dimension.
pub type Point = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("spatial dimension {0} is not supported (use 1 or 2)")]
    Dimension(usize),
    #[error("grid spacing {dx} does not divide the box width {width}")]
    Spacing { dx: f64, width: f64 },
    #[error("invalid grid parameter: {0}")]
    Invalid(&'static str),
}

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

/// Interpolation stencil: up to four nodes with nonnegative weights summing to 1.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
    pub len: usize,
}

impl Stencil {
    #[inline]
    pub fn apply(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.len).map(|k| self.weights[k] * f(self.nodes[k])).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    dim: usize,
    half_width: f64,
    dx: f64,
    n: usize,
}

impl SpatialGrid {
    pub fn new(dim: usize, half_width: f64, dx: f64) -> Result<Self, GridError> {
        if dim != 1 && dim != 2 {
            return Err(GridError::Dimension(dim));
        }
        if !(half_width > 0.0 && dx > 0.0 && half_width.is_finite() && dx.is_finite()) {
            return Err(GridError::Invalid("half width and spacing must be positive"));
        }
        let width = 2.0 * half_width;
        let cells = (width / dx).round();
        if cells < 2.0 || ((cells * dx - width) / width).abs() > 1e-9 {
            return Err(GridError::Spacing { dx, width });
        }
        Ok(Self { dim, half_width, dx: width / cells, n: cells as usize + 1 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Nodes per axis.
    pub fn nodes_per_axis(&self) -> usize {
        self.n
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        if self.dim == 1 {
            self.n
        } else {
            self.n * self.n
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn coord(&self, ix: usize) -> f64 {
        -self.half_width + ix as f64 * self.dx
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix + iy * self.n
    }

    #[inline]
    pub fn axes(&self, k: usize) -> (usize, usize) {
        (k % self.n, k / self.n)
    }

    #[inline]
    pub fn node(&self, k: usize) -> Point {
        let (ix, iy) = self.axes(k);
        if self.dim == 1 {
            [self.coord(ix), 0.0]
        } else {
            [self.coord(ix), self.coord(iy)]
        }
    }

    /// Node shifted by an integer offset, or `None` when it leaves the box.
    #[inline]
    pub fn offset(&self, k: usize, o: [i64; 2]) -> Option<usize> {
        let (ix, iy) = self.axes(k);
        let nx = ix as i64 + o[0];
        let ny = iy as i64 + o[1];
        let n = self.n as i64;
        if nx < 0 || nx >= n {
            return None;
        }
        if self.dim == 1 {
            return (o[1] == 0).then_some(nx as usize);
        }
        if ny < 0 || ny >= n {
            return None;
        }
        Some(self.index(nx as usize, ny as usize))
    }

    /// Neighbour along an axis with constant extension at the boundary.
    #[inline]
    pub fn neighbor_clamped(&self, k: usize, axis: usize, step: i64) -> usize {
        let mut o = [0i64; 2];
        o[axis] = step;
        self.offset(k, o).unwrap_or(k)
    }

    pub fn contains(&self, p: Point) -> bool {
        let tol = 1e-9 * self.half_width;
        (0..self.dim).all(|a| p[a].abs() <= self.half_width + tol) && (self.dim == 2 || p[1] == 0.0)
    }

    fn axis_locate(&self, c: f64) -> (usize, f64) {
        let s = ((c + self.half_width) / self.dx).clamp(0.0, (self.n - 1) as f64);
        let i = (s.floor() as usize).min(self.n - 2);
        (i, s - i as f64)
    }

    /// Linear (1D) or bilinear (2D) stencil, clamped to the box.
    pub fn stencil(&self, p: Point) -> Stencil {
        let (ix, wx) = self.axis_locate(p[0]);
        if self.dim == 1 {
            return Stencil { nodes: [ix, ix + 1, 0, 0], weights: [1.0 - wx, wx, 0.0, 0.0], len: 2 };
        }
        let (iy, wy) = self.axis_locate(p[1]);
        Stencil {
            nodes: [self.index(ix, iy), self.index(ix + 1, iy), self.index(ix, iy + 1), self.index(ix + 1, iy + 1)],
            weights: [(1.0 - wx) * (1.0 - wy), wx * (1.0 - wy), (1.0 - wx) * wy, wx * wy],
            len: 4,
        }
    }

    /// Interpolates a nodal scalar field stored with stride `stride` and offset `component`.
    pub fn interpolate(&self, values: &[f64], stride: usize, component: usize, p: Point) -> f64 {
        self.stencil(p).apply(|k| values[k * stride + component])
    }

    /// Node nearest to `p` (clamped).
    pub fn nearest(&self, p: Point) -> usize {
        let ax = |c: f64| (((c + self.half_width) / self.dx).round().clamp(0.0, (self.n - 1) as f64)) as usize;
        if self.dim == 1 {
            ax(p[0])
        } else {
            self.index(ax(p[0]), ax(p[1]))
        }
    }

    /// Exact node index if `p` lies on a node (within `1e-9·dx`).
    pub fn node_at(&self, p: Point) -> Option<usize> {
        let k = self.nearest(p);
        let q = self.node(k);
        (norm(sub(p, q)) <= 1e-9 * self.dx && self.contains(p)).then_some(k)
    }

    /// Integer offsets `o` with `|o|·dx <= radius`, sorted so that `o` is
    /// lexicographically ascending.
    pub fn offsets_within(&self, radius: f64) -> Vec<[i64; 2]> {
        let r = (radius / self.dx + 1e-9).floor() as i64;
        let mut out = Vec::new();
        let ry = if self.dim == 2 { r } else { 0 };
        for ox in -r..=r {
            for oy in -ry..=ry {
                if ((ox * ox + oy * oy) as f64) <= (radius / self.dx).powi(2) + 1e-9 {
                    out.push([ox, oy]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_must_divide_box() {
        assert!(SpatialGrid::new(1, 1.0, 0.3).is_err());
        let g = SpatialGrid::new(1, 8.0, 0.02).unwrap();
        assert_eq!(g.len(), 801);
        assert_eq!(g.node(400)[0], 0.0);
        assert!(SpatialGrid::new(3, 1.0, 0.1).is_err());
    }

    #[test]
    fn stencil_reproduces_linear_fields() {
        let g = SpatialGrid::new(2, 1.0, 0.25).unwrap();
        let vals: Vec<f64> = (0..g.len())
            .map(|k| {
                let p = g.node(k);
                2.0 * p[0] - 3.0 * p[1] + 1.0
            })
            .collect();
        let p = [0.13, -0.61];
        let v = g.interpolate(&vals, 1, 0, p);
        assert!((v - (2.0 * 0.13 + 3.0 * 0.61 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn clamped_outside_box() {
        let g = SpatialGrid::new(1, 1.0, 0.5).unwrap();
        let vals = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(g.interpolate(&vals, 1, 0, [7.0, 0.0]), 5.0);
        assert_eq!(g.interpolate(&vals, 1, 0, [-7.0, 0.0]), 1.0);
    }

    #[test]
    fn offsets_sorted_and_in_disk() {
        let g = SpatialGrid::new(2, 1.0, 0.1).unwrap();
        let o = g.offsets_within(0.25);
        assert!(o.windows(2).all(|w| w[0] < w[1]));
        assert!(o.iter().all(|v| ((v[0] * v[0] + v[1] * v[1]) as f64) <= 6.26));
        assert!(o.contains(&[2, 1]) && !o.contains(&[2, 2]));
    }
}
