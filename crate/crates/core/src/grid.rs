//! Tensor-product cell-centred grids on intervals and rectangles, scalar
//! cell fields, staggered face fields and the discrete operators that tie
//! them together.
//!
//! Cell `(i, j)` has flat index `i + nx*j`. The x-face left of cell `i`
//! in row `j` has index `i + (nx+1)*j`; the y-face below cell `(i, j)` has
//! index `i + nx*j`. Boundary faces carry zero normal flux.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
}

/// Uniform space-time grid over `Ω × [0, T]`, `Ω` an interval or rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dim: usize,
    /// Cells per axis; `n[1] = 1` in one dimension.
    pub n: [usize; 2],
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Number of time steps.
    pub nt: usize,
    pub t_end: f64,
}

impl Grid {
    pub fn new_1d(n: usize, lo: f64, hi: f64, nt: usize, t_end: f64) -> Result<Self, GridError> {
        let g = Self {
            dim: 1,
            n: [n, 1],
            lo: [lo, 0.0],
            hi: [hi, 1.0],
            nt,
            t_end,
        };
        g.check()?;
        Ok(g)
    }

    pub fn new_2d(
        n: [usize; 2],
        lo: [f64; 2],
        hi: [f64; 2],
        nt: usize,
        t_end: f64,
    ) -> Result<Self, GridError> {
        let g = Self {
            dim: 2,
            n,
            lo,
            hi,
            nt,
            t_end,
        };
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<(), GridError> {
        for k in 0..self.dim {
            if self.n[k] < 3 {
                return Err(GridError::Invalid(format!("axis {k}: need at least 3 cells")));
            }
            if !(self.hi[k] > self.lo[k]) {
                return Err(GridError::Invalid(format!("axis {k}: empty interval")));
            }
        }
        if self.nt == 0 || !(self.t_end > 0.0) {
            return Err(GridError::Invalid("need nt >= 1 and T > 0".into()));
        }
        Ok(())
    }

    /// Same spatial grid, different time axis.
    pub fn with_time(&self, nt: usize, t_end: f64) -> Self {
        Self {
            nt,
            t_end,
            ..self.clone()
        }
    }

    pub fn h(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.n[axis] as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.nt as f64
    }

    pub fn cells(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|k| self.h(k)).product()
    }

    pub fn measure(&self) -> f64 {
        (0..self.dim).map(|k| self.hi[k] - self.lo[k]).product()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_end * k as f64 / self.nt as f64
    }

    pub fn cell_center(&self, c: usize) -> [f64; 2] {
        let (i, j) = (c % self.n[0], c / self.n[0]);
        [
            self.lo[0] + (i as f64 + 0.5) * self.h(0),
            self.lo[1] + (j as f64 + 0.5) * self.h(1),
        ]
    }

    /// Number of faces normal to `axis`.
    pub fn faces(&self, axis: usize) -> usize {
        match axis {
            0 => (self.n[0] + 1) * self.n[1],
            _ => self.n[0] * (self.n[1] + 1),
        }
    }

    /// Face centre of face `f` normal to `axis`.
    pub fn face_center(&self, axis: usize, f: usize) -> [f64; 2] {
        let (h0, h1) = (self.h(0), self.h(1));
        if axis == 0 {
            let (i, j) = (f % (self.n[0] + 1), f / (self.n[0] + 1));
            [self.lo[0] + i as f64 * h0, self.lo[1] + (j as f64 + 0.5) * h1]
        } else {
            let (i, j) = (f % self.n[0], f / self.n[0]);
            [self.lo[0] + (i as f64 + 0.5) * h0, self.lo[1] + j as f64 * h1]
        }
    }

    /// Cells on either side of face `f` normal to `axis`, `None` on the boundary.
    pub fn face_cells(&self, axis: usize, f: usize) -> Option<(usize, usize)> {
        let nx = self.n[0];
        if axis == 0 {
            let (i, j) = (f % (nx + 1), f / (nx + 1));
            (i > 0 && i < nx).then(|| (i - 1 + nx * j, i + nx * j))
        } else {
            let (i, j) = (f % nx, f / nx);
            (j > 0 && j < self.n[1]).then(|| (i + nx * (j - 1), i + nx * j))
        }
    }

    /// Sample a function at cell centres.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.cells())
            .map(|c| {
                let x = self.cell_center(c);
                f(&x[..self.dim])
            })
            .collect()
    }

    pub fn mass(&self, u: &[f64]) -> f64 {
        u.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn mean(&self, u: &[f64]) -> f64 {
        u.iter().sum::<f64>() / u.len() as f64
    }

    /// Normal difference quotients on faces; boundary faces are zero.
    pub fn face_gradient(&self, u: &[f64]) -> FaceField {
        let mut comps = Vec::with_capacity(self.dim);
        for k in 0..self.dim {
            let h = self.h(k);
            let c: Vec<f64> = (0..self.faces(k))
                .map(|f| match self.face_cells(k, f) {
                    Some((a, b)) => (u[b] - u[a]) / h,
                    None => 0.0,
                })
                .collect();
            comps.push(c);
        }
        FaceField { comps }
    }

    /// `|Du|` on faces. In two dimensions the tangential derivative is the
    /// average of the two adjacent cell-centred central differences, with
    /// reflection at the boundary.
    pub fn face_grad_norm(&self, u: &[f64]) -> FaceField {
        let g = self.face_gradient(u);
        if self.dim == 1 {
            return FaceField {
                comps: vec![g.comps[0].iter().map(|x| x.abs()).collect()],
            };
        }
        let (nx, ny) = (self.n[0], self.n[1]);
        let (hx, hy) = (self.h(0), self.h(1));
        let at = |i: usize, j: usize| u[i + nx * j];
        let cy = |i: usize, j: usize| {
            let up = at(i, (j + 1).min(ny - 1));
            let dn = at(i, j.saturating_sub(1));
            (up - dn) / (2.0 * hy)
        };
        let cx = |i: usize, j: usize| {
            let r = at((i + 1).min(nx - 1), j);
            let l = at(i.saturating_sub(1), j);
            (r - l) / (2.0 * hx)
        };
        let mut gx = g.comps[0].clone();
        for j in 0..ny {
            for i in 1..nx {
                let f = i + (nx + 1) * j;
                let t = 0.5 * (cy(i - 1, j) + cy(i, j));
                gx[f] = (gx[f] * gx[f] + t * t).sqrt();
            }
        }
        let mut gy = g.comps[1].clone();
        for j in 1..ny {
            for i in 0..nx {
                let f = i + nx * j;
                let t = 0.5 * (cx(i, j - 1) + cx(i, j));
                gy[f] = (gy[f] * gy[f] + t * t).sqrt();
            }
        }
        FaceField { comps: vec![gx, gy] }
    }

    /// Discrete divergence of a face field, evaluated on cells.
    pub fn divergence(&self, v: &FaceField) -> Vec<f64> {
        let (nx, ny) = (self.n[0], self.n[1]);
        let mut out = vec![0.0; self.cells()];
        let hx = self.h(0);
        for j in 0..ny {
            for i in 0..nx {
                let c = i + nx * j;
                out[c] = (v.comps[0][i + 1 + (nx + 1) * j] - v.comps[0][i + (nx + 1) * j]) / hx;
            }
        }
        if self.dim == 2 {
            let hy = self.h(1);
            for j in 0..ny {
                for i in 0..nx {
                    let c = i + nx * j;
                    out[c] += (v.comps[1][i + nx * (j + 1)] - v.comps[1][i + nx * j]) / hy;
                }
            }
        }
        out
    }

    pub fn zero_faces(&self) -> FaceField {
        FaceField {
            comps: (0..self.dim).map(|k| vec![0.0; self.faces(k)]).collect(),
        }
    }
}

/// A vector field stored by normal components on faces.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub comps: Vec<Vec<f64>>,
}

impl FaceField {
    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn axpy(&mut self, a: f64, other: &FaceField) {
        for (c, o) in self.comps.iter_mut().zip(&other.comps) {
            for (x, y) in c.iter_mut().zip(o) {
                *x += a * y;
            }
        }
    }
}

/// Scalar field on cells for every time level `0..=nt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub grid: Grid,
    pub slices: Vec<Vec<f64>>,
}

impl SpaceTimeField {
    pub fn constant(grid: &Grid, value: f64) -> Self {
        Self {
            grid: grid.clone(),
            slices: vec![vec![value; grid.cells()]; grid.nt + 1],
        }
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.slices[k]
    }

    pub fn last(&self) -> &[f64] {
        self.slices.last().unwrap()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Face field for every time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSeries {
    pub grid: Grid,
    pub slices: Vec<FaceField>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_of_gradient_is_laplacian() {
        let g = Grid::new_2d([5, 4], [0.0, 0.0], [1.0, 2.0], 1, 1.0).unwrap();
        let u = g.sample(|x| x[0] * x[0] + 3.0 * x[1]);
        let lap = g.divergence(&g.face_gradient(&u));
        // interior cells see the exact 5-point Laplacian of a quadratic
        let c = 2 + 5 * 2;
        assert!((lap[c] - 2.0).abs() < 1e-10);
        // zero-flux boundary: the discrete total is zero
        assert!(lap.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn rejects_tiny_grids() {
        assert!(Grid::new_1d(2, 0.0, 1.0, 1, 1.0).is_err());
        assert!(Grid::new_1d(4, 0.0, 1.0, 0, 1.0).is_err());
    }
}
