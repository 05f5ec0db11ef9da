//! Right inverse of the divergence on boxes.
//!
//! The recursion works on cell averages and returns face values, so the
//! staggered divergence of the output reproduces the input up to round-off.
//! In one dimension it is the running integral. In dimension `n` the last
//! axis is integrated out, the `(n-1)`-dimensional problem is solved for
//! the slice integrals `ũ`, the result is spread along the last axis with a
//! bump `ρ_n`, and the last component takes up the remainder.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};
use thiserror::Error;

use crate::grid::{FaceField, FaceSeries, Grid, SpaceTimeField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivError {
    #[error("slice {slice} has mean {mean:e}; zero mean is required")]
    MeanNotZero { slice: usize, mean: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// `∫_{-1}^{1} exp(-1/(1-ξ²)) dξ`.
pub const BUMP_INTEGRAL: f64 = 0.443_993_816_168_079_4;

fn bump_profile(xi: f64) -> f64 {
    if xi.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - xi * xi)).exp()
    }
}

/// A box `J_1 × … × J_n`, optionally with a time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpec {
    pub intervals: Vec<(f64, f64)>,
    pub time: Option<(f64, f64)>,
}

impl BoxSpec {
    pub fn new(intervals: Vec<(f64, f64)>) -> Self {
        Self {
            intervals,
            time: None,
        }
    }

    pub fn unit(dim: usize) -> Self {
        Self::new(vec![(0.0, 1.0); dim])
    }

    pub fn from_grid(grid: &Grid) -> Self {
        Self {
            intervals: (0..grid.dim).map(|k| (grid.lo[k], grid.hi[k])).collect(),
            time: Some((0.0, grid.t_end)),
        }
    }

    pub fn dim(&self) -> usize {
        self.intervals.len()
    }

    pub fn len(&self, k: usize) -> f64 {
        self.intervals[k].1 - self.intervals[k].0
    }

    /// `Σ |J_k|`.
    pub fn perimeter_sum(&self) -> f64 {
        (0..self.dim()).map(|k| self.len(k)).sum()
    }

    /// Continuous bump `ρ_k` on `J_k`.
    pub fn bump(&self, k: usize, x: f64) -> f64 {
        let (a, b) = self.intervals[k];
        let xi = (2.0 * x - a - b) / (b - a);
        2.0 * bump_profile(xi) / (BUMP_INTEGRAL * (b - a))
    }

    /// `sup ρ_k · |J_k|` of the bump (the constant `C0`).
    pub fn bump_sup_constant() -> f64 {
        2.0 * (-1.0f64).exp() / BUMP_INTEGRAL
    }

    /// Bump values at `cells` cell centres of `J_k`, rescaled so that the
    /// midpoint sum is exactly one.
    pub fn bump_weights(&self, k: usize, cells: usize) -> Vec<f64> {
        let (a, _) = self.intervals[k];
        let h = self.len(k) / cells as f64;
        let raw: Vec<f64> = (0..cells)
            .map(|m| self.bump(k, a + (m as f64 + 0.5) * h))
            .collect();
        let s: f64 = raw.iter().sum::<f64>() * h;
        raw.into_iter().map(|r| r / s).collect()
    }
}

fn rinv_rec(u: ArrayViewD<f64>, hs: &[f64], rhos: &[Vec<f64>]) -> Vec<ArrayD<f64>> {
    let n = u.ndim();
    let last = n - 1;
    let nn = u.shape()[last];
    let hn = hs[last];
    if n == 1 {
        let mut v = ArrayD::zeros(IxDyn(&[nn + 1]));
        for g in 1..=nn {
            v[[g]] = v[[g - 1]] + hn * u[[g - 1]];
        }
        return vec![v];
    }
    let ut = u.sum_axis(Axis(last)) * hn;
    let z = rinv_rec(ut.view(), &hs[..last], &rhos[..last]);
    let rho = &rhos[last];
    let mut rho_shape = vec![1usize; n];
    rho_shape[last] = nn;
    let rho_arr = ArrayD::from_shape_vec(IxDyn(&rho_shape), rho.clone()).unwrap();
    let mut out: Vec<ArrayD<f64>> = z
        .into_iter()
        .map(|zk| &zk.insert_axis(Axis(last)) * &rho_arr)
        .collect();
    let mut shape = u.shape().to_vec();
    shape[last] = nn + 1;
    let mut vn = ArrayD::zeros(IxDyn(&shape));
    for g in 1..=nn {
        let prev = vn.index_axis(Axis(last), g - 1).to_owned();
        let next = &prev + &(&u.index_axis(Axis(last), g - 1) * hn) - &(&ut * (rho[g - 1] * hn));
        vn.index_axis_mut(Axis(last), g).assign(&next);
    }
    out.push(vn);
    out
}

/// Apply the right inverse to cell averages `u` on the box. Component `k`
/// of the result has one more entry than `u` along axis `k`.
pub fn rinv_spatial(u: &ArrayD<f64>, spec: &BoxSpec) -> Vec<ArrayD<f64>> {
    assert_eq!(u.ndim(), spec.dim(), "field and box dimensions differ");
    let hs: Vec<f64> = (0..spec.dim())
        .map(|k| spec.len(k) / u.shape()[k] as f64)
        .collect();
    let rhos: Vec<Vec<f64>> = (0..spec.dim())
        .map(|k| spec.bump_weights(k, u.shape()[k]))
        .collect();
    rinv_rec(u.view(), &hs, &rhos)
}

/// Staggered divergence of face components back to cells.
pub fn staggered_div(v: &[ArrayD<f64>], spec: &BoxSpec) -> ArrayD<f64> {
    let n = spec.dim();
    let mut cells = v[0].shape().to_vec();
    cells[0] -= 1;
    let mut out = ArrayD::zeros(IxDyn(&cells));
    for (k, vk) in v.iter().enumerate().take(n) {
        let nk = vk.shape()[k] - 1;
        let h = spec.len(k) / nk as f64;
        let hi = vk.slice_axis(Axis(k), ndarray::Slice::from(1..));
        let lo = vk.slice_axis(Axis(k), ndarray::Slice::from(..nk));
        out = out + (&hi - &lo) / h;
    }
    out
}

fn grid_to_array(grid: &Grid, u: &[f64]) -> ArrayD<f64> {
    let (nx, ny) = (grid.n[0], grid.n[1]);
    if grid.dim == 1 {
        ArrayD::from_shape_vec(IxDyn(&[nx]), u.to_vec()).unwrap()
    } else {
        ArrayD::from_shape_fn(IxDyn(&[nx, ny]), |ix| u[ix[0] + nx * ix[1]])
    }
}

fn array_to_faces(grid: &Grid, v: &[ArrayD<f64>]) -> FaceField {
    let (nx, ny) = (grid.n[0], grid.n[1]);
    if grid.dim == 1 {
        return FaceField {
            comps: vec![v[0].iter().copied().collect()],
        };
    }
    let mut gx = vec![0.0; grid.faces(0)];
    for j in 0..ny {
        for i in 0..=nx {
            gx[i + (nx + 1) * j] = v[0][[i, j]];
        }
    }
    let mut gy = vec![0.0; grid.faces(1)];
    for j in 0..=ny {
        for i in 0..nx {
            gy[i + nx * j] = v[1][[i, j]];
        }
    }
    FaceField { comps: vec![gx, gy] }
}

/// Right inverse of a cell field on the whole grid domain.
pub fn rinv_grid(grid: &Grid, u: &[f64]) -> FaceField {
    let spec = BoxSpec::from_grid(grid);
    array_to_faces(grid, &rinv_spatial(&grid_to_array(grid, u), &spec))
}

/// Bound ratio `‖𝓡u‖_∞ / ((Σ|J_k|) ‖u‖_∞)`.
pub fn bound_ratio(u: &ArrayD<f64>, spec: &BoxSpec) -> f64 {
    let v = rinv_spatial(u, spec);
    let vmax = v
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let umax = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if umax == 0.0 {
        0.0
    } else {
        vmax / (spec.perimeter_sum() * umax)
    }
}

/// Result of the space-time right inverse.
#[derive(Debug, Clone)]
pub struct SpaceTimeInverse {
    pub v: FaceSeries,
    /// `‖v_t‖_∞ / ((Σ|J_k|) ‖u_t‖_∞)` with central time differences.
    pub measured_constant: f64,
}

/// Apply the right inverse slice by slice.
pub fn rinv_spacetime(u: &SpaceTimeField) -> Result<SpaceTimeInverse, DivError> {
    let grid = &u.grid;
    let scale = 1.0 + u.max_abs();
    for (k, s) in u.slices.iter().enumerate() {
        let mean = grid.mean(s);
        if mean.abs() > 1e-10 * scale {
            return Err(DivError::MeanNotZero { slice: k, mean });
        }
    }
    let slices: Vec<FaceField> = u.slices.iter().map(|s| rinv_grid(grid, s)).collect();
    let nt = grid.nt;
    let dt = grid.dt();
    let diff = |a: &[f64], b: &[f64], w: f64| -> f64 {
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max(((x - y) / w).abs()))
    };
    let (mut vt, mut ut) = (0.0f64, 0.0f64);
    for k in 0..=nt {
        let (lo, hi) = (k.saturating_sub(1), (k + 1).min(nt));
        if hi == lo {
            continue;
        }
        let w = (hi - lo) as f64 * dt;
        ut = ut.max(diff(&u.slices[hi], &u.slices[lo], w));
        for c in 0..grid.dim {
            vt = vt.max(diff(&slices[hi].comps[c], &slices[lo].comps[c], w));
        }
    }
    let sum: f64 = (0..grid.dim).map(|k| grid.hi[k] - grid.lo[k]).sum();
    let measured_constant = if ut == 0.0 { 0.0 } else { vt / (sum * ut) };
    Ok(SpaceTimeInverse {
        v: FaceSeries {
            grid: grid.clone(),
            slices,
        },
        measured_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn bump_integrates_to_one() {
        let spec = BoxSpec::new(vec![(0.0, 2.0)]);
        let n = 200_000;
        let h = 2.0 / n as f64;
        let s: f64 = (0..n).map(|i| spec.bump(0, (i as f64 + 0.5) * h)).sum::<f64>() * h;
        assert!((s - 1.0).abs() < 1e-9, "{s}");
        let w = spec.bump_weights(0, 37);
        assert!((w.iter().sum::<f64>() * 2.0 / 37.0 - 1.0).abs() < 1e-14);
        assert!((BoxSpec::bump_sup_constant() - 1.6572).abs() < 1e-3);
    }

    #[test]
    fn one_dimensional_examples() {
        let spec = BoxSpec::unit(1);
        let n = 100;
        let ones = ArrayD::from_elem(IxDyn(&[n]), 1.0);
        let v = rinv_spatial(&ones, &spec);
        for g in 0..=n {
            assert!((v[0][[g]] - g as f64 / n as f64).abs() < 1e-14);
        }
        let h = 1.0 / n as f64;
        // cell averages of sin(2πx) give the exact antiderivative at faces
        let u = ArrayD::from_shape_fn(IxDyn(&[n]), |ix| {
            let a = ix[0] as f64 * h;
            ((2.0 * PI * a).cos() - (2.0 * PI * (a + h)).cos()) / (2.0 * PI * h)
        });
        let v = rinv_spatial(&u, &spec);
        for g in 0..=n {
            let x = g as f64 * h;
            let exact = (1.0 - (2.0 * PI * x).cos()) / (2.0 * PI);
            assert!((v[0][[g]] - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn two_dimensional_constant() {
        let spec = BoxSpec::unit(2);
        let n = 40;
        let ones = ArrayD::from_elem(IxDyn(&[n, n]), 1.0);
        let v = rinv_spatial(&ones, &spec);
        let d = staggered_div(&v, &spec);
        assert!(d.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let rho = spec.bump_weights(1, n);
        let h = 1.0 / n as f64;
        // first component: ρ₂(x₂) x₁
        assert!((v[0][[n, 7]] - rho[7]).abs() < 1e-12);
        // second component: x₂ − ∫₀^{x₂} ρ₂
        let cum: f64 = rho[..10].iter().sum::<f64>() * h;
        assert!((v[1][[3, 10]] - (10.0 * h - cum)).abs() < 1e-12);
    }

    #[test]
    fn zero_mean_vanishes_on_boundary() {
        let spec = BoxSpec::new(vec![(0.0, 1.0), (0.0, 2.0), (-1.0, 1.0)]);
        let u = ArrayD::from_shape_fn(IxDyn(&[6, 5, 8]), |ix| {
            ((ix[0] * 7 + ix[1] * 3 + ix[2]) % 5) as f64 - 2.0
        });
        let mean = u.mean().unwrap();
        let u = u - mean;
        let v = rinv_spatial(&u, &spec);
        assert!((staggered_div(&v, &spec) - &u).iter().all(|x| x.abs() < 1e-12));
        for (k, vk) in v.iter().enumerate() {
            let nk = vk.shape()[k] - 1;
            for g in [0, nk] {
                assert!(vk.index_axis(Axis(k), g).iter().all(|x| x.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn spacetime_mean_check() {
        let g = Grid::new_1d(16, 0.0, 1.0, 4, 1.0).unwrap();
        let u = SpaceTimeField {
            grid: g.clone(),
            slices: vec![vec![1.0; 16]; 5],
        };
        assert!(matches!(rinv_spacetime(&u), Err(DivError::MeanNotZero { .. })));
        let s = g.sample(|x| (2.0 * PI * x[0]).sin());
        let u = SpaceTimeField {
            grid: g.clone(),
            slices: vec![s; 5],
        };
        let r = rinv_spacetime(&u).unwrap();
        assert_eq!(r.measured_constant, 0.0);
    }
}
