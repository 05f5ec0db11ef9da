//! Rank-one geometry of the constraint sets.
//!
//! A space-time matrix `ξ = (p, c; B, β)` is `(1+n)×(n+1)`. The sets `F±`
//! require `tr B = 0`, `β = A(p)` and `|p|` in a branch annulus fixed by a
//! window `(r1, r2)`. Points `(p, β)` of `𝒮` are exactly those admitting
//! `t₋ < 0 < t₊`, a unit `q` and `γ ⟂ q` with `ξ + t±η ∈ F±`, where
//! `η = (q, b; γ⊗q / b, γ)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::profile_mod::ModCase;
use crate::profiles::{Branch, Profile, Sigma};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankOneError {
    #[error("window invalid: {0}")]
    WindowInvalid(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("precondition failed: {0}")]
    PreconditionFailed(String),
    #[error("Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian: DET = {det:e}")]
    SingularJacobian { det: f64 },
    #[error("degenerate division: sigma(|u|)/|u| = sigma(|v|)/|v|")]
    DivisionDegenerate,
}

/// `ξ = (p, c; B, β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeMatrix {
    pub p: DVector<f64>,
    pub c: f64,
    pub b: DMatrix<f64>,
    pub beta: DVector<f64>,
}

impl SpaceTimeMatrix {
    /// `(p, 0; O, β)`.
    pub fn diagonal(p: &[f64], beta: &[f64]) -> Self {
        let n = p.len();
        Self {
            p: DVector::from_column_slice(p),
            c: 0.0,
            b: DMatrix::zeros(n, n),
            beta: DVector::from_column_slice(beta),
        }
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    /// Dense `(1+n)×(n+1)` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        for j in 0..n {
            m[(0, j)] = self.p[j];
            m[(j + 1, n)] = self.beta[j];
            for i in 0..n {
                m[(i + 1, j)] = self.b[(i, j)];
            }
        }
        m[(0, n)] = self.c;
        m
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let n = m.nrows() - 1;
        Self {
            p: DVector::from_fn(n, |j, _| m[(0, j)]),
            c: m[(0, n)],
            b: DMatrix::from_fn(n, n, |i, j| m[(i + 1, j)]),
            beta: DVector::from_fn(n, |j, _| m[(j + 1, n)]),
        }
    }

    /// `ξ + t η`.
    pub fn shifted(&self, t: f64, eta: &DMatrix<f64>) -> Self {
        Self::from_matrix(&(self.to_matrix() + eta * t))
    }
}

fn flux(profile: &dyn Sigma, p: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(profile.flux(p.as_slice()))
}

/// Membership in `K(l)`: `tr B = l` and `β = A(p)`.
pub fn in_k(xi: &SpaceTimeMatrix, l: f64, profile: &dyn Sigma) -> bool {
    (xi.b.trace() - l).abs() <= 1e-10 && (&xi.beta - flux(profile, &xi.p)).norm() <= 1e-10
}

/// The four branch radii of a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radii {
    pub sm1: f64,
    pub sm2: f64,
    pub sp1: f64,
    pub sp2: f64,
}

/// Modification window `(r1, r2)` over a base profile.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowParams {
    pub case: ModCase,
    pub r1: f64,
    pub r2: f64,
    pub profile: Profile,
    pub radii: Radii,
    /// Smallest `|DET|` over the collinear sample used for validation.
    pub det_floor: f64,
}

impl WindowParams {
    pub fn new(profile: &Profile, r1: f64, r2: f64) -> Result<Self, RankOneError> {
        let (lo, hi) = (profile.valley_value(), profile.peak_value());
        let case = match profile.regime() {
            crate::profiles::Regime::PeronaMalik => ModCase::CaseI,
            crate::profiles::Regime::Hoellig => ModCase::CaseII,
        };
        if !(r1 > lo && r1 < r2 && r2 < hi) {
            return Err(RankOneError::WindowInvalid(format!(
                "need {lo} < r1 < r2 < {hi}, got ({r1}, {r2})"
            )));
        }
        let inv = |r: f64, b: Branch| {
            profile
                .branch_inverse(r, b)
                .map_err(|e| RankOneError::WindowInvalid(e.to_string()))
        };
        let radii = Radii {
            sm1: inv(r1, Branch::Minus)?,
            sm2: inv(r2, Branch::Minus)?,
            sp1: inv(r1, Branch::Plus)?,
            sp2: inv(r2, Branch::Plus)?,
        };
        let mut w = Self {
            case,
            r1,
            r2,
            profile: profile.clone(),
            radii,
            det_floor: 0.0,
        };
        let q = DVector::from_element(1, 1.0);
        let g = DVector::zeros(1);
        let mut floor = f64::INFINITY;
        for k in 0..32 {
            let r = r1 + (r2 - r1) * (k as f64 + 0.5) / 32.0;
            let u = &q * inv(r, Branch::Plus)?;
            let v = &q * inv(r, Branch::Minus)?;
            let d = det_b(&u, &v, &q, &g, profile)?;
            floor = floor.min(d.abs());
        }
        if floor < 1e-6 {
            return Err(RankOneError::WindowInvalid(format!(
                "collinear DET floor {floor:e} below 1e-6"
            )));
        }
        w.det_floor = floor;
        Ok(w)
    }

    /// Open annulus of `F₋`.
    pub fn minus_interval(&self) -> (f64, f64) {
        (self.radii.sm1, self.radii.sm2)
    }

    /// Open annulus of `F₊`.
    pub fn plus_interval(&self) -> (f64, f64) {
        match self.case {
            ModCase::CaseI => (self.radii.sp2, self.radii.sp1),
            ModCase::CaseII => (self.radii.sp1, self.radii.sp2),
        }
    }

    /// `sup |p|` over `𝒮`.
    pub fn p_bound(&self) -> f64 {
        match self.case {
            ModCase::CaseI => self.radii.sp1,
            ModCase::CaseII => self.radii.sp2,
        }
    }

    /// `δ₂` of the collinear-projection bound.
    pub fn delta2(&self) -> f64 {
        (self.radii.sp1 - self.radii.sp2).abs()
    }

    /// `h_i(s₋(r2), s₊(r2), r2; δ₁, δ₂, r2 − r1)`.
    pub fn projection_bound(&self) -> Result<f64, RankOneError> {
        h_bound(
            self.case,
            self.radii.sm2,
            self.radii.sp2,
            self.r2,
            self.radii.sm2 - self.radii.sm1,
            self.delta2(),
            self.r2 - self.r1,
        )
    }
}

/// Which of `F₋`, `F₊` contains a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FClass {
    FMinus,
    FPlus,
    Neither,
}

pub fn classify_f(xi: &SpaceTimeMatrix, w: &WindowParams) -> FClass {
    if !in_k(xi, 0.0, &w.profile) {
        return FClass::Neither;
    }
    let s = xi.p.norm();
    let inside = |(a, b): (f64, f64)| s > a && s < b;
    if inside(w.minus_interval()) {
        FClass::FMinus
    } else if inside(w.plus_interval()) {
        FClass::FPlus
    } else {
        FClass::Neither
    }
}

/// Half-angle `θ` between two planar vectors `R1 e₋`, `R2 e₊`,
/// `e± = (±sin θ, cos θ)`, for which `(R̃1 e₋ − R̃2 e₊) ⟂ (R1 e₋ − R2 e₊)`.
pub fn twod_angle(r1: f64, r2: f64, rt1: f64, rt2: f64) -> Result<f64, RankOneError> {
    if !(r2 > r1 && r1 > 0.0 && rt2 > 0.0) {
        return Err(RankOneError::DomainError(format!(
            "need R2 > R1 > 0 and R~2 > 0, got ({r1}, {r2}, {rt1}, {rt2})"
        )));
    }
    if rt1 < rt2 {
        return Err(RankOneError::DomainError(format!(
            "R~1 = {rt1} < R~2 = {rt2}"
        )));
    }
    let num = (r2 - r1) * (rt1 - rt2);
    let den = (r1 + r2) * (rt1 + rt2);
    Ok((num / den).sqrt().atan())
}

/// `e₋ = (−sin θ, cos θ)`, `e₊ = (sin θ, cos θ)`.
pub fn twod_directions(theta: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = theta.sin_cos();
    ([-s, c], [s, c])
}

fn g_angle(case: ModCase, a: f64, b: f64, c: f64, d1: f64, d2: f64, eta: f64) -> f64 {
    let v = match case {
        ModCase::CaseI => (b - a + d1 + d2) * eta / (2.0 * (a + b - d1) * (c - eta)),
        ModCase::CaseII => (b - a + d1) * eta / (2.0 * (a + b - d1 - d2) * (c - eta)),
    };
    v.sqrt().atan()
}

fn chord(x: f64, y: f64, g: f64) -> f64 {
    // distance between x(0,1) and y(sin g, cos g), maximised over the pair
    ((y * y + x * x - 2.0 * x * y * g.cos()).max(0.0)).sqrt()
}

/// The three terms `h_{i,1}, h_{i,2}, h_{i,3}`.
pub fn h_terms(
    case: ModCase,
    a: f64,
    b: f64,
    c: f64,
    d1: f64,
    d2: f64,
    eta: f64,
) -> Result<[f64; 3], RankOneError> {
    let ok = a > 0.0
        && b > a
        && c > 0.0
        && (0.0..a).contains(&d1)
        && (0.0..c).contains(&eta)
        && match case {
            ModCase::CaseI => d2 >= 0.0,
            ModCase::CaseII => (0.0..b - a).contains(&d2),
        };
    if !ok {
        return Err(RankOneError::DomainError(format!(
            "(d1, d2, eta) = ({d1}, {d2}, {eta}) outside the admissible box for (a, b, c) = ({a}, {b}, {c})"
        )));
    }
    let g = g_angle(case, a, b, c, d1, d2, eta);
    let round = |r: f64| 2f64.sqrt() * r * (1.0 - g.cos()).max(0.0).sqrt();
    let h1 = round(a).max(chord(a, a - d1, g));
    let outer = match case {
        ModCase::CaseI => b + d2,
        ModCase::CaseII => b - d2,
    };
    let h2 = round(b).max(chord(b, outer, g));
    let h3 = round(c).max(chord(c, c - eta, g));
    Ok([h1, h2, h3])
}

/// `h_i(a, b, c; δ₁, δ₂, η) = max_j h_{i,j}`.
pub fn h_bound(
    case: ModCase,
    a: f64,
    b: f64,
    c: f64,
    d1: f64,
    d2: f64,
    eta: f64,
) -> Result<f64, RankOneError> {
    let t = h_terms(case, a, b, c, d1, d2, eta)?;
    Ok(t[0].max(t[1]).max(t[2]))
}

/// Result of [`collinear_projection`].
#[derive(Debug, Clone, PartialEq)]
pub struct CollinearProjection {
    pub zeta0: DVector<f64>,
    /// Largest of the four distances to `s±(r2)ζ⁰` and `r2 ζ⁰`.
    pub max_distance: f64,
    pub bound: f64,
}

/// Project an orthogonal pair `p±` onto the collinear configuration
/// `s±(r2) ζ⁰`, `A = r2 ζ⁰`.
pub fn collinear_projection(
    p_minus: &DVector<f64>,
    p_plus: &DVector<f64>,
    w: &WindowParams,
) -> Result<CollinearProjection, RankOneError> {
    let (m, p) = (p_minus.norm(), p_plus.norm());
    let (ml, mh) = w.minus_interval();
    let (pl, ph) = w.plus_interval();
    if !(m > ml && m < mh && p > pl && p < ph) {
        return Err(RankOneError::PreconditionFailed(format!(
            "radii |p-| = {m}, |p+| = {p} violate the ordering ({ml}, {mh}) < ({pl}, {ph})"
        )));
    }
    let am = flux(&w.profile, p_minus);
    let ap = flux(&w.profile, p_plus);
    let orth = (&ap - &am).dot(&(p_plus - p_minus));
    if orth.abs() > 1e-10 {
        return Err(RankOneError::PreconditionFailed(format!(
            "(A(p+) - A(p-)).(p+ - p-) = {orth:e}"
        )));
    }
    let sum = p_plus / p + p_minus / m;
    let zeta0 = &sum / sum.norm();
    let d = [
        (&zeta0 * w.radii.sm2 - p_minus).norm(),
        (&zeta0 * w.radii.sp2 - p_plus).norm(),
        (&zeta0 * w.r2 - &am).norm(),
        (&zeta0 * w.r2 - &ap).norm(),
    ];
    let max_distance = d.iter().cloned().fold(0.0, f64::max);
    let bound = w.projection_bound()?;
    if max_distance > bound * (1.0 + 1e-12) + 1e-14 {
        return Err(RankOneError::PreconditionFailed(format!(
            "distance {max_distance} exceeds bound {bound}"
        )));
    }
    Ok(CollinearProjection {
        zeta0,
        max_distance,
        bound,
    })
}

/// `DG(w) = (σ' − σ/|w|) ŵŵᵀ + (σ/|w|) I`, the Jacobian of `A`.
pub fn flux_jacobian(profile: &dyn Sigma, w: &DVector<f64>) -> DMatrix<f64> {
    let n = w.len();
    let s = w.norm();
    let a = profile.coefficient(s);
    let mut m = DMatrix::identity(n, n) * a;
    if s > 0.0 {
        let hat = w / s;
        m += (&hat * hat.transpose()) * (profile.sigma_prime(s) - a);
    }
    m
}

/// Closed-form `DET(u, v, q, γ)`.
pub fn det_b(
    u: &DVector<f64>,
    v: &DVector<f64>,
    q: &DVector<f64>,
    gamma: &DVector<f64>,
    profile: &dyn Sigma,
) -> Result<f64, RankOneError> {
    let n = u.len();
    let (ru, rv) = (u.norm(), v.norm());
    let (au, av) = (profile.sigma(ru) / ru, profile.sigma(rv) / rv);
    let (bu, bv) = (profile.sigma_prime(ru), profile.sigma_prime(rv));
    let den = au - av;
    if den.abs() <= 1e-14 {
        return Err(RankOneError::DivisionDegenerate);
    }
    let uh = u / ru;
    let vh = v / rv;
    let vq = vh.dot(q);
    let base = &vh * ((bv - av) * vq) + q * av;
    let left = &base - gamma;
    let right = &base + gamma;
    let denom2 = den * ((bv - av) * vq * vq + av);
    let m = DMatrix::identity(n, n) + (&uh * uh.transpose()) * ((bu - au) / den)
        - (&vh * vh.transpose()) * ((bv - av) / den)
        + (&left * right.transpose()) / denom2;
    Ok(m.determinant())
}

/// A rank-one connection for a point of `𝒮`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneWitness {
    pub q: DVector<f64>,
    pub gamma: DVector<f64>,
    pub t_minus: f64,
    pub t_plus: f64,
    pub b: f64,
}

impl RankOneWitness {
    /// `η = (q, b; γ⊗q / b, γ)`.
    pub fn eta(&self) -> DMatrix<f64> {
        let n = self.q.len();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        for j in 0..n {
            m[(0, j)] = self.q[j];
            m[(j + 1, n)] = self.gamma[j];
            for i in 0..n {
                m[(i + 1, j)] = self.gamma[i] * self.q[j] / self.b;
            }
        }
        m[(0, n)] = self.b;
        m
    }

    pub fn with_b(&self, b: f64) -> Self {
        Self { b, ..self.clone() }
    }

    /// `λ = −t₋ / (t₊ − t₋)`.
    pub fn lambda(&self) -> f64 {
        -self.t_minus / (self.t_plus - self.t_minus)
    }

    pub fn endpoints(&self, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (p + &self.q * self.t_minus, p + &self.q * self.t_plus)
    }

    /// Check `ξ ± t±η ∈ F±` for `ξ = (p, c; B, β)`.
    pub fn certifies(&self, xi: &SpaceTimeMatrix, w: &WindowParams) -> bool {
        let eta = self.eta();
        (self.q.norm() - 1.0).abs() <= 1e-12
            && self.gamma.dot(&self.q).abs() <= 1e-12
            && self.t_minus < 0.0
            && self.t_plus > 0.0
            && classify_f(&xi.shifted(self.t_minus, &eta), w) == FClass::FMinus
            && classify_f(&xi.shifted(self.t_plus, &eta), w) == FClass::FPlus
    }
}

/// Output of [`solve_rank_one`].
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneSolve {
    pub witness: RankOneWitness,
    /// Newton iterations of the run that produced the witness.
    pub iterations: usize,
    /// Iterations summed over every seed and continuation step tried.
    pub total_iterations: usize,
    pub residual: f64,
    pub det: f64,
}

struct System<'a> {
    p: DVector<f64>,
    beta: DVector<f64>,
    profile: &'a Profile,
}

impl System<'_> {
    fn unpack(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>, f64) {
        let n = self.p.len();
        (x.rows(0, n).into(), x.rows(n, n).into(), x[2 * n])
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.p.len();
        let (g, q, s) = self.unpack(x);
        let wm = &self.p + &q * s;
        let wp = &self.p + &q;
        let e1 = flux(self.profile, &wm) - &self.beta - &g * s;
        let e2 = flux(self.profile, &wp) - &self.beta - &g;
        let mut r = DVector::zeros(2 * n + 1);
        r.rows_mut(0, n).copy_from(&e1);
        r.rows_mut(n, n).copy_from(&e2);
        r[2 * n] = g.dot(&q);
        r
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.p.len();
        let (g, q, s) = self.unpack(x);
        let wm = &self.p + &q * s;
        let wp = &self.p + &q;
        let dm = flux_jacobian(self.profile, &wm);
        let dp = flux_jacobian(self.profile, &wp);
        let mut j = DMatrix::zeros(2 * n + 1, 2 * n + 1);
        let omega = &dm * &q - &g;
        for r in 0..n {
            j[(r, r)] = -s;
            j[(n + r, r)] = -1.0;
            for c in 0..n {
                j[(r, n + c)] = s * dm[(r, c)];
                j[(n + r, n + c)] = dp[(r, c)];
            }
            j[(r, 2 * n)] = omega[r];
            j[(2 * n, r)] = q[r];
            j[(2 * n, n + r)] = g[r];
        }
        j
    }

    fn det(&self, x: &DVector<f64>) -> f64 {
        let (g, q, s) = self.unpack(x);
        let t = q.norm();
        let wm = &self.p + &q * s;
        let wp = &self.p + &q;
        det_b(&wp, &wm, &(&q / t), &(&g / t), self.profile).unwrap_or(0.0)
    }
}

/// Analytic Jacobian of the implicit system at `(γ', q', s')`.
pub fn system_jacobian(
    p: &DVector<f64>,
    beta: &DVector<f64>,
    gamma_p: &DVector<f64>,
    q_p: &DVector<f64>,
    s_p: f64,
    profile: &Profile,
) -> DMatrix<f64> {
    let sys = System {
        p: p.clone(),
        beta: beta.clone(),
        profile,
    };
    let n = p.len();
    let mut x = DVector::zeros(2 * n + 1);
    x.rows_mut(0, n).copy_from(gamma_p);
    x.rows_mut(n, n).copy_from(q_p);
    x[2 * n] = s_p;
    sys.jacobian(&x)
}

fn pack(w: &RankOneWitness) -> DVector<f64> {
    let n = w.q.len();
    let mut x = DVector::zeros(2 * n + 1);
    x.rows_mut(0, n).copy_from(&(&w.gamma * w.t_plus));
    x.rows_mut(n, n).copy_from(&(&w.q * w.t_plus));
    x[2 * n] = w.t_minus / w.t_plus;
    x
}

fn unpack_witness(x: &DVector<f64>, n: usize, b: f64) -> RankOneWitness {
    let g: DVector<f64> = x.rows(0, n).into();
    let q: DVector<f64> = x.rows(n, n).into();
    let t = q.norm();
    RankOneWitness {
        q: &q / t,
        gamma: &g / t,
        t_minus: x[2 * n] * t,
        t_plus: t,
        b,
    }
}

/// Newton iteration with backtracking; returns the solution and the
/// number of iterations used.
fn newton(
    sys: &System,
    mut x: DVector<f64>,
    max_iter: usize,
) -> Result<(DVector<f64>, usize, f64), RankOneError> {
    let mut r = sys.residual(&x);
    let mut rn = r.norm();
    for it in 0..max_iter {
        if rn <= 1e-13 {
            return Ok((x, it, rn));
        }
        let det = sys.det(&x);
        if det.abs() < 1e-8 {
            return Err(RankOneError::SingularJacobian { det });
        }
        let j = sys.jacobian(&x);
        let Some(dx) = j.lu().solve(&(-&r)) else {
            return Err(RankOneError::SingularJacobian { det });
        };
        let mut step = 1.0;
        loop {
            let xn = &x + &dx * step;
            let rn_new = sys.residual(&xn).norm();
            if rn_new < rn || step < 1e-4 {
                x = xn;
                r = sys.residual(&x);
                rn = rn_new;
                break;
            }
            step *= 0.5;
        }
        if !rn.is_finite() {
            break;
        }
    }
    if rn <= 1e-10 {
        Ok((x, max_iter, rn))
    } else {
        Err(RankOneError::NoConvergence {
            iterations: max_iter,
            residual: rn,
        })
    }
}

/// Exact collinear witness at `(|p| ζ, r ζ)`, `ζ = p/|p|`.
pub fn collinear_witness(
    p: &DVector<f64>,
    r: f64,
    w: &WindowParams,
) -> Result<RankOneWitness, RankOneError> {
    let s = p.norm();
    if s == 0.0 {
        return Err(RankOneError::PreconditionFailed("p = 0 has no radial direction".into()));
    }
    if !(r > w.r1 && r < w.r2) {
        return Err(RankOneError::PreconditionFailed(format!(
            "radial flux {r} outside ({}, {})",
            w.r1, w.r2
        )));
    }
    let sm = w
        .profile
        .branch_inverse(r, Branch::Minus)
        .map_err(|e| RankOneError::PreconditionFailed(e.to_string()))?;
    let sp = w
        .profile
        .branch_inverse(r, Branch::Plus)
        .map_err(|e| RankOneError::PreconditionFailed(e.to_string()))?;
    if !(sm < s && s < sp) {
        return Err(RankOneError::PreconditionFailed(format!(
            "|p| = {s} not between s-(r) = {sm} and s+(r) = {sp}"
        )));
    }
    Ok(RankOneWitness {
        q: p / s,
        gamma: DVector::zeros(p.len()),
        t_minus: sm - s,
        t_plus: sp - s,
        b: 1.0,
    })
}

/// Solve the implicit system `F(γ', q', s'; p, β) = 0`.
pub fn solve_rank_one(
    p: &DVector<f64>,
    beta: &DVector<f64>,
    w: &WindowParams,
    seed: Option<&RankOneWitness>,
) -> Result<RankOneSolve, RankOneError> {
    let n = p.len();
    if beta.norm() > w.r2 || p.norm() > w.p_bound() {
        return Err(RankOneError::PreconditionFailed(format!(
            "(|p|, |beta|) = ({}, {}) violates the bounds ({}, {})",
            p.norm(),
            beta.norm(),
            w.p_bound(),
            w.r2
        )));
    }
    let sys = System {
        p: p.clone(),
        beta: beta.clone(),
        profile: &w.profile,
    };
    let finish = |x: DVector<f64>, iterations: usize, total_iterations: usize, residual: f64| {
        let witness = unpack_witness(&x, n, 1.0);
        let xi = SpaceTimeMatrix::diagonal(p.as_slice(), beta.as_slice());
        if !witness.certifies(&xi, w) {
            return Err(RankOneError::NoConvergence {
                iterations,
                residual,
            });
        }
        let det = sys.det(&x);
        Ok(RankOneSolve {
            witness,
            iterations,
            total_iterations,
            residual,
            det,
        })
    };
    if let Some(seed) = seed {
        let (x, it, res) = newton(&sys, pack(seed), 50)?;
        return finish(x, it, it, res);
    }
    let zeta = p / p.norm().max(1e-300);
    let r = beta.dot(&zeta).clamp(
        w.r1 + 1e-9 * (w.r2 - w.r1),
        w.r2 - 1e-9 * (w.r2 - w.r1),
    );
    let seed = collinear_witness(p, r, w)?;
    let x0 = pack(&seed);
    // Direct attempt first.
    let mut spent = 0;
    match newton(&sys, x0.clone(), 50) {
        Ok((x, it, res)) => {
            spent += it;
            if let Ok(sol) = finish(x, it, spent, res) {
                return Ok(sol);
            }
        }
        Err(RankOneError::NoConvergence { iterations, .. }) => spent += iterations,
        Err(_) => {}
    }
    // Continuation from the exact collinear point `(p, r ζ)`: only the
    // part of `β` orthogonal to `ζ` is switched on, in small steps.
    let start = &zeta * r;
    let steps = 8;
    let mut xk = x0.clone();
    let mut last = None;
    for k in 1..=steps {
        let bk = &start + (beta - &start) * (k as f64 / steps as f64);
        let sk = System {
            p: p.clone(),
            beta: bk,
            profile: &w.profile,
        };
        match newton(&sk, xk.clone(), 50) {
            Ok((x, it, res)) => {
                spent += it;
                xk = x;
                last = Some((it, res));
            }
            Err(e) => {
                if let RankOneError::NoConvergence { iterations, .. } = e {
                    spent += iterations;
                }
                last = None;
                break;
            }
        }
    }
    if let Some((it, res)) = last {
        if let Ok(sol) = finish(xk, it, spent, res) {
            return Ok(sol);
        }
    }
    // Seeds tilted away from the radial direction, for points close to
    // `F₋` where the radial seed sits next to a singular Jacobian.
    let mut failure = RankOneError::NoConvergence {
        iterations: spent,
        residual: f64::INFINITY,
    };
    for seed in tilted_seeds(p, beta, w) {
        match newton(&sys, pack(&seed), 50) {
            Ok((x, it, res)) => {
                spent += it;
                match finish(x, it, spent, res) {
                    Ok(sol) => return Ok(sol),
                    Err(e) => failure = e,
                }
            }
            Err(RankOneError::NoConvergence { iterations, .. }) => spent += iterations,
            Err(_) => {}
        }
    }
    Err(failure)
}

/// Seeds with `q` rotated from `p/|p|` by small angles in the plane of
/// `p` and `β` (or of `p` and a coordinate axis), and radial fluxes
/// spread over the part of the window compatible with `p·q`.
fn tilted_seeds(p: &DVector<f64>, beta: &DVector<f64>, w: &WindowParams) -> Vec<RankOneWitness> {
    let n = p.len();
    let s = p.norm();
    if n < 2 || s == 0.0 {
        return Vec::new();
    }
    let zeta = p / s;
    let mut other = beta - &zeta * beta.dot(&zeta);
    if other.norm() < 1e-12 {
        let k = (0..n).min_by(|&a, &b| zeta[a].abs().total_cmp(&zeta[b].abs())).unwrap();
        other = DVector::zeros(n);
        other[k] = 1.0;
        other -= &zeta * zeta[k];
    }
    let perp = other.normalize();
    let mut out = Vec::new();
    for ang in [0.15f64, -0.15, 0.4, -0.4] {
        let q = &zeta * ang.cos() + &perp * ang.sin();
        let along = p.dot(&q);
        // radial fluxes whose minus branch lies below `along`
        let top = if along > w.radii.sm2 {
            w.r2
        } else {
            w.profile.sigma(along.max(0.0)).min(w.r2)
        };
        if top <= w.r1 {
            continue;
        }
        for j in 1..4 {
            let r = w.r1 + (top - w.r1) * j as f64 / 4.0;
            let (Ok(sm), Ok(sp)) = (
                w.profile.branch_inverse(r, Branch::Minus),
                w.profile.branch_inverse(r, Branch::Plus),
            ) else {
                continue;
            };
            let (tm, tp) = (sm - along, sp - along);
            if !(tm < 0.0 && tp > 0.0) {
                continue;
            }
            let mut gamma = (&q * r - beta) / tp;
            let gq = gamma.dot(&q);
            gamma -= &q * gq;
            out.push(RankOneWitness {
                q: q.clone(),
                gamma,
                t_minus: tm,
                t_plus: tp,
                b: 1.0,
            });
        }
    }
    out
}

/// Outcome of a membership test for `𝒮`.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub inside: bool,
    pub witness: Option<RankOneWitness>,
    pub diagnostics: String,
}

/// Decide `(p, β) ∈ 𝒮` by producing a witness.
pub fn membership_s(p: &DVector<f64>, beta: &DVector<f64>, w: &WindowParams) -> Membership {
    if p.norm() > w.p_bound() || beta.norm() > w.r2 {
        return Membership {
            inside: false,
            witness: None,
            diagnostics: format!(
                "bounds fail: |p| = {} (max {}), |beta| = {} (max {})",
                p.norm(),
                w.p_bound(),
                beta.norm(),
                w.r2
            ),
        };
    }
    let mut notes = Vec::new();
    match solve_rank_one(p, beta, w, None) {
        Ok(s) => {
            return Membership {
                inside: true,
                witness: Some(s.witness),
                diagnostics: format!("radial seed, {} iterations", s.iterations),
            }
        }
        Err(e) => notes.push(format!("radial seed: {e}")),
    }
    // Sweep of seeds over directions and radial fluxes.
    let n = p.len();
    let mut dirs = Vec::new();
    for k in 0..n {
        for sgn in [1.0, -1.0] {
            let mut d = DVector::zeros(n);
            d[k] = sgn;
            dirs.push(d);
        }
    }
    let mut tried = 0;
    for q in &dirs {
        for j in 1..4 {
            let r = w.r1 + (w.r2 - w.r1) * j as f64 / 4.0;
            let sm = w.profile.branch_inverse(r, Branch::Minus);
            let sp = w.profile.branch_inverse(r, Branch::Plus);
            let (Ok(sm), Ok(sp)) = (sm, sp) else { continue };
            let along = p.dot(q);
            let (tm, tp) = (sm - along, sp - along);
            if !(tm < 0.0 && tp > 0.0) {
                continue;
            }
            let perp = p - q * along;
            let seed = RankOneWitness {
                q: q.clone(),
                gamma: (q * r - beta - &perp * 0.0) / tp,
                t_minus: tm,
                t_plus: tp,
                b: 1.0,
            };
            let mut seed = seed;
            let gq = seed.gamma.dot(q);
            seed.gamma -= q * gq;
            tried += 1;
            if let Ok(s) = solve_rank_one(p, beta, w, Some(&seed)) {
                return Membership {
                    inside: true,
                    witness: Some(s.witness),
                    diagnostics: format!("swept seed after {tried} attempts"),
                };
            }
        }
    }
    notes.push(format!("{tried} swept seeds failed"));
    Membership {
        inside: false,
        witness: None,
        diagnostics: notes.join("; "),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm() -> Profile {
        Profile::perona_malik_rational(1.0).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn k_membership() {
        let p = pm();
        let xi = SpaceTimeMatrix::diagonal(&[0.3, -0.2], &p.flux(&[0.3, -0.2]));
        assert!(in_k(&xi, 0.0, &p));
        let mut bad = xi.clone();
        bad.beta[0] += 1e-3;
        assert!(!in_k(&bad, 0.0, &p));
        let mut tf = xi.clone();
        tf.b = DMatrix::from_diagonal(&v(&[1.0, -1.0]));
        assert!(in_k(&tf, 0.0, &p));
    }

    #[test]
    fn classification() {
        let w = WindowParams::new(&pm(), 0.3, 0.4).unwrap();
        let p = pm();
        let m = SpaceTimeMatrix::diagonal(&[0.45], &p.flux(&[0.45]));
        assert_eq!(classify_f(&m, &w), FClass::FMinus);
        let edge = SpaceTimeMatrix::diagonal(&[w.radii.sm1], &p.flux(&[w.radii.sm1]));
        assert_eq!(classify_f(&edge, &w), FClass::Neither);
        let plus = SpaceTimeMatrix::diagonal(&[2.2], &p.flux(&[2.2]));
        assert_eq!(classify_f(&plus, &w), FClass::FPlus);
        assert!((w.radii.sp1 - 3.0).abs() < 1e-10);
    }

    #[test]
    fn angle_examples() {
        assert_eq!(twod_angle(1.0, 2.0, 1.0, 1.0).unwrap(), 0.0);
        let th = twod_angle(1.0, 3.0, 2.0, 1.0).unwrap();
        assert!((th - (1.0f64 / 6.0).sqrt().atan()).abs() < 1e-15);
        assert!((th - 0.387597).abs() < 1e-6);
        let (em, ep) = twod_directions(th);
        let a = [2.0 * em[0] - ep[0], 2.0 * em[1] - ep[1]];
        let b = [em[0] - 3.0 * ep[0], em[1] - 3.0 * ep[1]];
        assert!((a[0] * b[0] + a[1] * b[1]).abs() < 1e-12);
        assert!(twod_angle(1.0, 2.0, 1.0, 1.5).is_err());
        let small = twod_angle(1.0, 2.0, 1.0, 1.0 - 1e-15).unwrap();
        assert!(small > 0.0 && small < 1e-7);
    }

    #[test]
    fn h_bound_examples() {
        let h = h_bound(ModCase::CaseI, 0.5, 2.0, 0.4, 0.1, 0.5, 0.0).unwrap();
        assert!((h - 0.5).abs() < 1e-15);
        assert_eq!(h_bound(ModCase::CaseII, 0.5, 2.0, 0.4, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(h_bound(ModCase::CaseII, 0.5, 2.0, 0.4, 0.0, 1.6, 0.0).is_err());
    }

    #[test]
    fn collinear_det_example() {
        let q = v(&[1.0]);
        let d = det_b(&(&q * 2.0), &(&q * 0.5), &q, &v(&[0.0]), &pm()).unwrap();
        assert!((d - 0.2).abs() < 1e-12);
        let q2 = v(&[0.6, 0.8]);
        let d2 = det_b(&(&q2 * 2.0), &(&q2 * 0.5), &q2, &v(&[0.0, 0.0]), &pm()).unwrap();
        assert!((d2 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn collinear_seed_is_exact() {
        let w = WindowParams::new(&pm(), 0.3, 0.4).unwrap();
        let p = v(&[1.2 * 0.6, 1.2 * 0.8]);
        let beta = &p / p.norm() * 0.35;
        let s = solve_rank_one(&p, &beta, &w, None).unwrap();
        assert!(s.residual <= 1e-12);
        assert!(s.witness.gamma.norm() < 1e-12);
        assert!(s.iterations <= 1);
    }

    #[test]
    fn membership_negatives() {
        let w = WindowParams::new(&pm(), 0.3, 0.4).unwrap();
        let r = membership_s(&v(&[3.5, 0.0]), &v(&[0.3, 0.0]), &w);
        assert!(!r.inside);
        let r = membership_s(&v(&[0.0, 0.0]), &v(&[0.0, 0.0]), &w);
        assert!(!r.inside, "{r:?}");
        assert!(!r.diagnostics.is_empty());
    }
}
