//! Implicit finite-volume solver for `u_t = div Ã(Du)` with zero-flux
//! boundary conditions, and the boundary-function pair `(u*, v*)`.
//!
//! Each step is backward Euler. In one dimension the nonlinear system is
//! solved by Newton's method (its Jacobian is tridiagonal with face weights
//! `σ̃'`); in two the diffusion coefficient `f̃(|Du|²)` is lagged one
//! Picard iterate, the linear systems go to Jacobi-preconditioned
//! conjugate gradients, and the Picard map is Anderson-accelerated.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::{FaceField, FaceSeries, Grid, GridError, SpaceTimeField};
use crate::profile_mod::{modify_profile, ModifiedProfile, ModifyError};
use crate::profiles::{Branch, Critical, Profile, Sigma};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("Picard iteration did not converge at step {step} after {iters} iterations (last change {change:e})")]
    StabilityFailure { step: usize, iters: usize, change: f64 },
    #[error("linear solve failed: residual {residual:e}")]
    SingularSystem { residual: f64 },
    #[error("gradient left the matched region: max |Du| = {max_grad} > {limit}")]
    SubcriticalityViolated { max_grad: f64, limit: f64 },
    #[error("initial datum has {got} values, grid has {want} cells")]
    Shape { got: usize, want: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Modify(#[from] ModifyError),
}

const PICARD_MAX: usize = 50;
const ANDERSON_DEPTH: usize = 5;

/// Type-II Anderson mixing for a fixed-point map `x ↦ g(x)`. Mixed iterates
/// are affine combinations of map outputs, so linear invariants of the map
/// (here the mass) are kept.
struct Anderson {
    prev: Option<(Vec<f64>, Vec<f64>)>,
    df: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
}

impl Anderson {
    fn new() -> Self {
        Self {
            prev: None,
            df: VecDeque::new(),
            dg: VecDeque::new(),
        }
    }

    fn mix(&mut self, x: &[f64], gx: Vec<f64>) -> Vec<f64> {
        let f: Vec<f64> = gx.iter().zip(x).map(|(a, b)| a - b).collect();
        if let Some((f0, g0)) = self.prev.take() {
            self.df.push_back(f.iter().zip(&f0).map(|(a, b)| a - b).collect());
            self.dg.push_back(gx.iter().zip(&g0).map(|(a, b)| a - b).collect());
            if self.df.len() > ANDERSON_DEPTH {
                self.df.pop_front();
                self.dg.pop_front();
            }
        }
        self.prev = Some((f.clone(), gx.clone()));
        let m = self.df.len();
        if m == 0 {
            return gx;
        }
        let a = DMatrix::from_fn(f.len(), m, |i, j| self.df[j][i]);
        let Ok(gamma) = a.svd(true, true).solve(&DVector::from_vec(f), 1e-12) else {
            return gx;
        };
        let mut out = gx;
        for (j, dg) in self.dg.iter().enumerate() {
            for (o, d) in out.iter_mut().zip(dg) {
                *o -= gamma[j] * d;
            }
        }
        out
    }
}

/// Solution together with the discrete fluxes actually used in each step.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub u: SpaceTimeField,
    /// `flux[k]` is the face flux used to advance from level `k` to `k+1`.
    pub flux: Vec<FaceField>,
    pub picard_iterations: usize,
}

fn face_coefficients(grid: &Grid, sigma: &dyn Sigma, u: &[f64]) -> FaceField {
    let s = grid.face_grad_norm(u);
    FaceField {
        comps: s
            .comps
            .iter()
            .map(|c| c.iter().map(|&x| sigma.coefficient(x)).collect())
            .collect(),
    }
}

/// Flux `a Du` on faces for fixed face coefficients `a`.
fn flux_with(grid: &Grid, a: &FaceField, u: &[f64]) -> FaceField {
    let mut g = grid.face_gradient(u);
    for (c, ac) in g.comps.iter_mut().zip(&a.comps) {
        for (x, y) in c.iter_mut().zip(ac) {
            *x *= y;
        }
    }
    g
}

/// `(I - dt div(a D)) x`.
fn apply(grid: &Grid, a: &FaceField, dt: f64, x: &[f64]) -> Vec<f64> {
    let d = grid.divergence(&flux_with(grid, a, x));
    x.iter().zip(d).map(|(xi, di)| xi - dt * di).collect()
}

fn diagonal(grid: &Grid, a: &FaceField, dt: f64) -> Vec<f64> {
    let mut diag = vec![1.0; grid.cells()];
    for k in 0..grid.dim {
        let w = dt / (grid.h(k) * grid.h(k));
        for f in 0..grid.faces(k) {
            if let Some((l, r)) = grid.face_cells(k, f) {
                diag[l] += w * a.comps[k][f];
                diag[r] += w * a.comps[k][f];
            }
        }
    }
    diag
}

fn thomas(grid: &Grid, a: &FaceField, dt: f64, b: &[f64]) -> Vec<f64> {
    let n = grid.n[0];
    let w = dt / (grid.h(0) * grid.h(0));
    let af = &a.comps[0];
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        if i > 0 {
            lower[i] = -w * af[i];
            diag[i] += w * af[i];
        }
        if i + 1 < n {
            upper[i] = -w * af[i + 1];
            diag[i] += w * af[i + 1];
        }
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = b[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / m;
        d[i] = (b[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients for a symmetric positive
/// (semi)definite operator. With `project` the iterates are kept in the
/// zero-mean subspace.
pub(crate) fn pcg(
    op: impl Fn(&[f64]) -> Vec<f64>,
    diag: &[f64],
    b: &[f64],
    x0: &[f64],
    tol: f64,
    project: bool,
) -> (Vec<f64>, f64) {
    let n = b.len();
    let proj = |v: &mut Vec<f64>| {
        if project {
            let m = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= m);
        }
    };
    let mut x = x0.to_vec();
    proj(&mut x);
    let ax = op(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    proj(&mut r);
    let bnorm = dot(b, b).sqrt().max(1e-300);
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, di)| ri / di).collect();
    proj(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt();
    for _ in 0..(10 * n + 100) {
        if res <= tol * bnorm {
            break;
        }
        let ap = op(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        proj(&mut r);
        z = r.iter().zip(diag).map(|(ri, di)| ri / di).collect();
        proj(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = dot(&r, &r).sqrt();
    }
    let ax = op(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    proj(&mut r);
    (x, dot(&r, &r).sqrt() / bnorm)
}

fn linear_step(grid: &Grid, a: &FaceField, dt: f64, b: &[f64], guess: &[f64]) -> Vec<f64> {
    if grid.dim == 1 {
        return thomas(grid, a, dt, b);
    }
    let diag = diagonal(grid, a, dt);
    let (mut x, _) = pcg(|v| apply(grid, a, dt, v), &diag, b, guess, 1e-14, false);
    // A constant shift leaves the operator's divergence part untouched and
    // restores the exact discrete mass of the right-hand side.
    let shift = (b.iter().sum::<f64>() - x.iter().sum::<f64>()) / x.len() as f64;
    x.iter_mut().for_each(|v| *v += shift);
    x
}

/// One Newton iterate for `x − dt div Ã(Dx) = b` in one dimension; `a`
/// holds the coefficients at `x`.
fn newton_update(grid: &Grid, sigma: &dyn Sigma, a: &FaceField, dt: f64, b: &[f64], x: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = apply(grid, a, dt, x)
        .iter()
        .zip(b)
        .map(|(ax, bi)| bi - ax)
        .collect();
    let s = grid.face_grad_norm(x);
    let jac = FaceField {
        comps: vec![s.comps[0].iter().map(|&g| sigma.sigma_prime(g)).collect()],
    };
    let d = thomas(grid, &jac, dt, &r);
    x.iter().zip(d).map(|(xi, di)| xi + di).collect()
}

/// Evolve `u0` and keep the fluxes of every step.
pub fn evolve(sigma: &dyn Sigma, u0: &[f64], grid: &Grid) -> Result<Evolution, PdeError> {
    if u0.len() != grid.cells() {
        return Err(PdeError::Shape {
            got: u0.len(),
            want: grid.cells(),
        });
    }
    let dt = grid.dt();
    let mut slices = Vec::with_capacity(grid.nt + 1);
    let mut fluxes = Vec::with_capacity(grid.nt);
    slices.push(u0.to_vec());
    let mut total = 0;
    for step in 0..grid.nt {
        let prev = slices.last().unwrap().clone();
        let scale = 1.0 + prev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut cur = prev.clone();
        let mut done = None;
        let mut change = f64::INFINITY;
        let mut accel = Anderson::new();
        for it in 0..PICARD_MAX {
            let a = face_coefficients(grid, sigma, &cur);
            let next = if grid.dim == 1 {
                newton_update(grid, sigma, &a, dt, &prev, &cur)
            } else {
                linear_step(grid, &a, dt, &prev, &cur)
            };
            change = next
                .iter()
                .zip(&cur)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            total += 1;
            if change <= 1e-11 * scale {
                cur = next;
                done = Some((a, it));
                break;
            }
            cur = if grid.dim == 1 { next } else { accel.mix(&cur, next) };
        }
        let Some((mut a, _)) = done else {
            return Err(PdeError::StabilityFailure {
                step,
                iters: PICARD_MAX,
                change,
            });
        };
        if grid.dim == 1 {
            a = face_coefficients(grid, sigma, &cur);
        }
        fluxes.push(flux_with(grid, &a, &cur));
        slices.push(cur);
    }
    Ok(Evolution {
        u: SpaceTimeField {
            grid: grid.clone(),
            slices,
        },
        flux: fluxes,
        picard_iterations: total,
    })
}

/// Solve the zero-flux initial-boundary value problem for `u_t = div Ã(Du)`.
pub fn solve_neumann_ibvp(
    sigma: &dyn Sigma,
    u0: &[f64],
    grid: &Grid,
) -> Result<SpaceTimeField, PdeError> {
    Ok(evolve(sigma, u0, grid)?.u)
}

/// Solve `Δh = f` with zero-flux conditions and `∑h = 0`; `f` must have
/// zero mean.
pub fn neumann_poisson(grid: &Grid, f: &[f64]) -> Result<Vec<f64>, PdeError> {
    if grid.dim == 1 {
        // Cumulative sums invert the 1D operator exactly.
        let h = grid.h(0);
        let n = f.len();
        let mut g = vec![0.0; n + 1];
        for i in 0..n {
            g[i + 1] = g[i] + f[i] * h;
        }
        let mut u = vec![0.0; n];
        for i in 1..n {
            u[i] = u[i - 1] + g[i] * h;
        }
        let m = u.iter().sum::<f64>() / n as f64;
        u.iter_mut().for_each(|x| *x -= m);
        let res = g[n].abs() / (f.iter().map(|x| x.abs()).sum::<f64>() * h).max(1e-300);
        if res > 1e-8 && g[n].abs() > 1e-14 {
            return Err(PdeError::SingularSystem { residual: res });
        }
        return Ok(u);
    }
    let ones = FaceField {
        comps: (0..grid.dim).map(|k| vec![1.0; grid.faces(k)]).collect(),
    };
    // -Δ is positive semidefinite; solve -Δh = -f.
    let op = |v: &[f64]| -> Vec<f64> {
        grid.divergence(&grid.face_gradient(v))
            .into_iter()
            .map(|x| -x)
            .collect()
    };
    let diag: Vec<f64> = diagonal(grid, &ones, 1.0).iter().map(|d| d - 1.0).collect();
    let rhs: Vec<f64> = f.iter().map(|x| -x).collect();
    let (u, res) = pcg(op, &diag, &rhs, &vec![0.0; f.len()], 1e-13, true);
    if res > 1e-8 {
        return Err(PdeError::SingularSystem { residual: res });
    }
    Ok(u)
}

/// The boundary function of a zero-mean datum.
#[derive(Debug, Clone)]
pub struct BoundaryFunction {
    pub u_star: SpaceTimeField,
    pub v_star: FaceSeries,
    /// Solution of `Δh = u0` with zero-flux data and zero mean.
    pub h_field: Vec<f64>,
    /// `v0 = Dh` on faces.
    pub v0: FaceField,
    /// Mean removed from the datum before solving.
    pub mean: f64,
}

/// Build `(u*, v*)`. `v*` accumulates the fluxes used by the solver so
/// that the discrete identity `div v* = u*` holds on every time level.
pub fn build_boundary_function(
    sigma: &dyn Sigma,
    u0: &[f64],
    grid: &Grid,
) -> Result<BoundaryFunction, PdeError> {
    let mean = grid.mean(u0);
    let datum: Vec<f64> = u0.iter().map(|x| x - mean).collect();
    let h_field = neumann_poisson(grid, &datum)?;
    let v0 = grid.face_gradient(&h_field);
    let ev = evolve(sigma, &datum, grid)?;
    let mut slices = Vec::with_capacity(grid.nt + 1);
    let mut cur = v0.clone();
    slices.push(cur.clone());
    for f in &ev.flux {
        cur.axpy(grid.dt(), f);
        slices.push(cur.clone());
    }
    Ok(BoundaryFunction {
        u_star: ev.u,
        v_star: FaceSeries {
            grid: grid.clone(),
            slices,
        },
        h_field,
        v0,
        mean,
    })
}

/// `max_k ‖div v*(·,t_k) − u*(·,t_k)‖_∞`.
pub fn boundary_defect(bf: &BoundaryFunction) -> f64 {
    let g = &bf.u_star.grid;
    bf.v_star
        .slices
        .iter()
        .zip(&bf.u_star.slices)
        .map(|(v, u)| {
            g.divergence(v)
                .iter()
                .zip(u)
                .fold(0.0f64, |m, (d, x)| m.max((d - x).abs()))
        })
        .fold(0.0, f64::max)
}

/// `‖Du(·,t_k)‖_∞` for every time level.
pub fn gradient_max_profile(u: &SpaceTimeField) -> Vec<f64> {
    u.slices
        .iter()
        .map(|s| u.grid.face_grad_norm(s).max_abs())
        .collect()
}

/// Classical solution for subcritical data.
#[derive(Debug, Clone)]
pub struct SpecialSolution {
    pub u: SpaceTimeField,
    pub modified: ModifiedProfile,
    /// `s₋(r1)`, the radius up to which `σ̃ = σ`.
    pub matched_radius: f64,
    pub max_grad: f64,
    /// Every sampled `|Du|` stayed in the region where `Ã = A`.
    pub matched: bool,
}

/// Solve with a surrogate that agrees with `σ` on the range of `|Du0|`.
pub fn classical_special_solution(
    profile: &Profile,
    u0: &[f64],
    grid: &Grid,
) -> Result<SpecialSolution, PdeError> {
    let g0 = grid.face_grad_norm(u0).max_abs();
    let (r1, r2) = match profile.critical() {
        Critical::Pm { s0 } => {
            if g0 >= s0 {
                return Err(PdeError::SubcriticalityViolated {
                    max_grad: g0,
                    limit: s0,
                });
            }
            let peak = profile.sigma(s0);
            let r1 = if g0 > 0.0 { profile.sigma(g0) } else { 0.5 * peak };
            let r1 = r1.min(peak * (1.0 - 1e-6));
            (r1, 0.5 * (r1 + peak))
        }
        Critical::H { s1, .. } => {
            if g0 >= s1 {
                return Err(PdeError::SubcriticalityViolated {
                    max_grad: g0,
                    limit: s1,
                });
            }
            let (lo, hi) = (profile.valley_value(), profile.peak_value());
            let r1 = profile
                .sigma(g0)
                .max(lo + 0.25 * (hi - lo))
                .min(hi - 1e-6 * (hi - lo));
            (r1, 0.5 * (r1 + hi))
        }
    };
    let modified = modify_profile(profile, r1, r2)?;
    let matched_radius = profile
        .branch_inverse(r1, Branch::Minus)
        .map_err(ModifyError::from)?;
    let u = solve_neumann_ibvp(&modified, u0, grid)?;
    let max_grad = gradient_max_profile(&u).into_iter().fold(0.0, f64::max);
    let limit = matched_radius * 1.02;
    if max_grad > limit {
        return Err(PdeError::SubcriticalityViolated { max_grad, limit });
    }
    Ok(SpecialSolution {
        u,
        modified,
        matched_radius,
        max_grad,
        matched: max_grad <= matched_radius * (1.0 + 1e-9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::Linear;
    use std::f64::consts::PI;

    #[test]
    fn heat_matches_separation_of_variables() {
        let mut errs = Vec::new();
        for &n in &[32usize, 64] {
            let dt_ratio = 0.25;
            let h = 1.0 / n as f64;
            let t = 0.05;
            let nt = (t / (dt_ratio * h * h)).round() as usize;
            let g = Grid::new_1d(n, 0.0, 1.0, nt, t).unwrap();
            let u0 = g.sample(|x| (PI * x[0]).cos());
            let u = solve_neumann_ibvp(&Linear, &u0, &g).unwrap();
            let err = g
                .sample(|x| (-PI * PI * t).exp() * (PI * x[0]).cos())
                .iter()
                .zip(u.last())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            errs.push(err);
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 1.8, "order {order}, errs {errs:?}");
    }

    #[test]
    fn constants_and_mass() {
        let g = Grid::new_2d([8, 6], [0.0, 0.0], [1.0, 1.0], 10, 0.1).unwrap();
        let u = solve_neumann_ibvp(&Linear, &vec![2.5; 48], &g).unwrap();
        assert!(u.slices.iter().all(|s| s.iter().all(|x| (x - 2.5).abs() < 1e-12)));
        let p = Profile::perona_malik_rational(1.0).unwrap();
        let mp = modify_profile(&p, 0.3, 0.4).unwrap();
        let u0 = g.sample(|x| 0.8 * (PI * x[0]).cos() * (PI * x[1]).cos());
        let u = solve_neumann_ibvp(&mp, &u0, &g).unwrap();
        let m0 = g.mass(&u0);
        for s in &u.slices {
            assert!((g.mass(s) - m0).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_oracle_and_boundary_identity() {
        let n = 64;
        let g = Grid::new_1d(n, 0.0, 1.0, 20, 0.02).unwrap();
        let u0 = g.sample(|x| (PI * x[0]).cos());
        let bf = build_boundary_function(&Linear, &u0, &g).unwrap();
        let exact = g.sample(|x| -(PI * x[0]).cos() / (PI * PI));
        let err = exact
            .iter()
            .zip(&bf.h_field)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 2e-4, "{err}");
        assert_eq!(bf.v0.comps[0][0], 0.0);
        assert_eq!(bf.v0.comps[0][n], 0.0);
        assert!(boundary_defect(&bf) < 1e-12);

        let g2 = Grid::new_2d([10, 8], [0.0, 0.0], [1.0, 1.0], 4, 0.01).unwrap();
        let u0 = g2.sample(|x| (PI * x[0]).cos() + (2.0 * PI * x[1]).cos());
        let bf = build_boundary_function(&Linear, &u0, &g2).unwrap();
        assert!(boundary_defect(&bf) < 1e-9);
    }

    #[test]
    fn special_solution_subcritical() {
        let p = Profile::perona_malik_rational(1.0).unwrap();
        let g = Grid::new_1d(64, 0.0, 1.0, 50, 0.05).unwrap();
        let u0 = g.sample(|x| 0.1 * (PI * x[0]).cos());
        let s = classical_special_solution(&p, &u0, &g).unwrap();
        assert!(s.max_grad <= 0.1 * PI * 1.02);
        let zero = classical_special_solution(&p, &vec![0.0; 64], &g).unwrap();
        assert!(zero.u.max_abs() == 0.0);
    }
}
