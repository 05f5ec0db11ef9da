//! Tiles, the map `𝒫` and oscillation patches on a single box.

use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayD, Axis, IxDyn, Slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::div_inverse::{rinv_grid, BoxSpec};
use crate::grid::{FaceField, Grid};
use crate::rankone::RankOneWitness;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OscillationError {
    #[error("tile infeasible: {0}")]
    InfeasibleTau(String),
    #[error("invalid tile parameters: {0}")]
    InvalidTile(String),
    #[error("invalid box or witness: {0}")]
    InvalidPatch(String),
}

const MAX_PERIODS: f64 = 1e8;

/// A `C¹` function on `(k, l)` whose second derivative alternates between
/// `−λ1` and `λ2` over exact periods. It vanishes with its derivative at
/// both ends of the tiled range `[start, start + count·period]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileFunction {
    pub interval: (f64, f64),
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub start: f64,
    pub period: f64,
    pub count: usize,
}

/// Build a tile on `(k, l)`.
///
/// One period runs `up (d2/2), down (d1), up (d2/2)` with
/// `d1 : d2 = λ2 : λ1`, so `∫ f'' = 0` per period. The period is the
/// largest exact divisor of the tiled length with `P ≤ τ (l − k)` and
/// `‖f‖ + ‖f'‖ ≤ τ/2`. A margin of `τ (l − k)/8` (at most `(l − k)/8`) on
/// each side keeps the support strictly inside.
pub fn tile_function(
    k: f64,
    l: f64,
    lambda1: f64,
    lambda2: f64,
    tau: f64,
) -> Result<TileFunction, OscillationError> {
    if !(k < l) || !(lambda1 >= 0.0 && lambda2 >= 0.0) || !(tau > 0.0) {
        return Err(OscillationError::InvalidTile(format!(
            "need k < l, lambda >= 0, tau > 0; got ({k}, {l}, {lambda1}, {lambda2}, {tau})"
        )));
    }
    let len = l - k;
    let margin = len * tau.min(1.0) / 8.0;
    let inner = len - 2.0 * margin;
    let mut p_max = tau * len;
    let kappa = if lambda1 + lambda2 > 0.0 {
        lambda1 * lambda2 / (lambda1 + lambda2)
    } else {
        0.0
    };
    if kappa > 0.0 {
        // ‖f'‖ = Pκ/2 and ‖f‖ = c P² with c from one period of unit length
        let unit = TileFunction {
            interval: (0.0, 1.0),
            lambda1,
            lambda2,
            tau,
            start: 0.0,
            period: 1.0,
            count: 1,
        };
        let c = unit.sup_f();
        // c P² + κ P / 2 ≤ τ / 2
        let amp = (-kappa / 2.0 + (kappa * kappa / 4.0 + 2.0 * c * tau).sqrt()) / (2.0 * c);
        p_max = p_max.min(amp);
    }
    let n = (inner / p_max).ceil();
    if !n.is_finite() || n > MAX_PERIODS {
        return Err(OscillationError::InfeasibleTau(format!(
            "tau = {tau:e} needs {n:e} periods on an interval of length {len}"
        )));
    }
    let count = (n as usize).max(1);
    Ok(TileFunction {
        interval: (k, l),
        lambda1,
        lambda2,
        tau,
        start: k + margin,
        period: inner / count as f64,
        count,
    })
}

impl TileFunction {
    fn phases(&self) -> (f64, f64, f64) {
        let s = self.lambda1 + self.lambda2;
        if s == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let d2 = self.period * self.lambda1 / s;
        let d1 = self.period * self.lambda2 / s;
        (d1, d2, self.lambda2 * d2 / 2.0)
    }

    /// `(f, f', f'')` at `s`.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        let end = self.start + self.period * self.count as f64;
        if s <= self.start || s >= end || self.lambda1 * self.lambda2 == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let (d1, d2, a) = self.phases();
        let (l1, l2) = (self.lambda1, self.lambda2);
        let y = (s - self.start).rem_euclid(self.period);
        let f1 = l2 * d2 * d2 / 8.0;
        if y < d2 / 2.0 {
            (l2 * y * y / 2.0, l2 * y, l2)
        } else if y < d2 / 2.0 + d1 {
            let z = y - d2 / 2.0;
            (f1 + a * z - l1 * z * z / 2.0, a - l1 * z, -l1)
        } else {
            let z = y - d2 / 2.0 - d1;
            (f1 - a * z + l2 * z * z / 2.0, -a + l2 * z, l2)
        }
    }

    /// `‖f'‖_∞`.
    pub fn sup_fp(&self) -> f64 {
        if self.lambda1 * self.lambda2 == 0.0 {
            return 0.0;
        }
        self.phases().2
    }

    /// `‖f‖_∞`, attained where `f'` changes sign in the down phase.
    pub fn sup_f(&self) -> f64 {
        if self.lambda1 * self.lambda2 == 0.0 {
            return 0.0;
        }
        let (_, d2, a) = self.phases();
        self.lambda2 * d2 * d2 / 8.0 + a * a / (2.0 * self.lambda1)
    }

    /// Tiled range where `f'' ∈ {−λ1, λ2}`.
    pub fn active_range(&self) -> (f64, f64) {
        (self.start, self.start + self.period * self.count as f64)
    }

    /// Fraction of `(k, l)` where `f''` is not one of the two slopes.
    pub fn exceptional_fraction(&self) -> f64 {
        let (a, b) = self.active_range();
        let (k, l) = self.interval;
        1.0 - (b - a) / (l - k)
    }
}

/// Forward difference along `axis`, truncated by one node in every
/// spatial axis so that all components share a shape.
fn fwd(h: &ArrayD<f64>, axis: usize, spacing: f64, axes: usize) -> ArrayD<f64> {
    let up = h.slice_axis(Axis(axis), Slice::from(1..));
    let dn = h.slice_axis(Axis(axis), Slice::from(..-1));
    let mut d = (&up - &dn) / spacing;
    for a in 0..axes {
        if a != axis {
            d = d.slice_axis(Axis(a), Slice::from(..-1)).to_owned();
        }
    }
    d
}

/// Discrete `𝒫`: `φ = q·Dh`, `ψ = (1/b)(γ⊗q − q⊗γ) Dh` with forward
/// differences of nodal values `h` on one time slice.
pub fn pmap(
    h: &ArrayD<f64>,
    spacing: &[f64],
    q: &DVector<f64>,
    gamma: &DVector<f64>,
    b: f64,
) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
    let n = q.len();
    let grads: Vec<ArrayD<f64>> = (0..n).map(|j| fwd(h, j, spacing[j], n)).collect();
    let mut phi = ArrayD::zeros(grads[0].raw_dim());
    for j in 0..n {
        phi.scaled_add(q[j], &grads[j]);
    }
    let mut psi = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = ArrayD::zeros(grads[0].raw_dim());
        for j in 0..n {
            let m = (gamma[i] * q[j] - q[i] * gamma[j]) / b;
            if m != 0.0 {
                c.scaled_add(m, &grads[j]);
            }
        }
        psi.push(c);
    }
    (phi, psi)
}

/// Forward-difference divergence of a node-aligned vector field.
pub fn node_divergence(psi: &[ArrayD<f64>], spacing: &[f64]) -> ArrayD<f64> {
    let n = psi.len();
    let mut out: Option<ArrayD<f64>> = None;
    for (i, c) in psi.iter().enumerate() {
        let d = fwd(c, i, spacing[i], n);
        out = Some(match out {
            None => d,
            Some(o) => o + d,
        });
    }
    out.unwrap_or_else(|| ArrayD::zeros(IxDyn(&[0])))
}

/// Smooth ramp for a cutoff: `0` within `μ` of an end, quintic
/// smoothstep on `[μ, w]`, `1` beyond. Returns `(r, r', r'')`.
fn ramp(x: f64, lo: f64, hi: f64, w: f64) -> (f64, f64, f64) {
    let m = w / 2.0;
    let side = |d: f64| -> (f64, f64, f64) {
        if d <= m {
            (0.0, 0.0, 0.0)
        } else if d >= w {
            (1.0, 0.0, 0.0)
        } else {
            let u = (d - m) / (w - m);
            let s = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
            let s1 = 30.0 * u * u * (1.0 - u) * (1.0 - u) / (w - m);
            let s2 = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / ((w - m) * (w - m));
            (s, s1, s2)
        }
    };
    let (a, a1, a2) = side(x - lo);
    let (b, b1, b2) = side(hi - x);
    // b depends on hi - x, so its derivative flips sign
    (a * b, a1 * b - a * b1, a2 * b - 2.0 * a1 * b1 + a * b2)
}

const RAMP_D1: f64 = 1.875;
const RAMP_D2: f64 = 5.773_502_691_896_258;

/// Measured properties of a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchProperties {
    /// `max |div ψ|` on the node grid.
    pub div_psi: f64,
    /// Measure of `{∇ω ∉ {η₁, η₂}}` (Monte Carlo).
    pub exceptional: f64,
    /// `sup dist(∇ω, [η₁, η₂])` over the samples.
    pub segment_dist: f64,
    /// `sup |ω|` over the samples.
    pub sup_omega: f64,
    /// `max_t |∫_Q φ(x, t) dx|` on the node grid.
    pub slice_mean: f64,
}

/// `ω = 𝒫(ρ h)`, `h = f(q·x + bt)`, on a space-time box.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillationPatch {
    /// Spatial box with its time interval.
    pub domain: BoxSpec,
    pub witness: RankOneWitness,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tile: TileFunction,
    /// Collar width of the cutoff per axis (space axes, then time).
    pub collar: Vec<f64>,
    pub properties: PatchProperties,
}

impl OscillationPatch {
    fn axes(&self) -> Vec<(f64, f64)> {
        let mut a = self.domain.intervals.clone();
        a.push(self.domain.time.unwrap_or((0.0, 1.0)));
        a
    }

    fn grad_s(&self) -> DVector<f64> {
        let n = self.witness.q.len();
        DVector::from_fn(n + 1, |i, _| {
            if i < n {
                self.witness.q[i]
            } else {
                self.witness.b
            }
        })
    }

    /// `(H, ∇H, ∇²H)` for `H = ρ f(s)` at a space-time point.
    pub fn potential(&self, z: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let axes = self.axes();
        let d = axes.len();
        let r: Vec<(f64, f64, f64)> = (0..d)
            .map(|a| ramp(z[a], axes[a].0, axes[a].1, self.collar[a]))
            .collect();
        let rho: f64 = r.iter().map(|x| x.0).product();
        let prod_except = |skip: &[usize]| -> f64 {
            (0..d).filter(|a| !skip.contains(a)).map(|a| r[a].0).product()
        };
        let grad_rho = DVector::from_fn(d, |a, _| r[a].1 * prod_except(&[a]));
        let hess_rho = DMatrix::from_fn(d, d, |a, b| {
            if a == b {
                r[a].2 * prod_except(&[a])
            } else {
                r[a].1 * r[b].1 * prod_except(&[a, b])
            }
        });
        let gs = self.grad_s();
        let s: f64 = (0..d).map(|a| gs[a] * z[a]).sum();
        let (f, f1, f2) = self.tile.eval(s);
        let h = rho * f;
        let grad = &grad_rho * f + &gs * (rho * f1);
        let hess = &hess_rho * f
            + (&grad_rho * gs.transpose() + &gs * grad_rho.transpose()) * f1
            + (&gs * gs.transpose()) * (rho * f2);
        (h, grad, hess)
    }

    fn antisym(&self) -> DMatrix<f64> {
        let (q, g) = (&self.witness.q, &self.witness.gamma);
        (g * q.transpose() - q * g.transpose()) / self.witness.b
    }

    /// `ω(z) = (φ, ψ)`.
    pub fn omega(&self, z: &[f64]) -> DVector<f64> {
        let n = self.witness.q.len();
        let (_, grad, _) = self.potential(z);
        let dx = grad.rows(0, n).into_owned();
        let psi = self.antisym() * &dx;
        let mut out = DVector::zeros(n + 1);
        out[0] = self.witness.q.dot(&dx);
        out.rows_mut(1, n).copy_from(&psi);
        out
    }

    /// `∇ω(z)` as a `(1+n)×(n+1)` matrix.
    pub fn grad_omega(&self, z: &[f64]) -> DMatrix<f64> {
        let n = self.witness.q.len();
        let (_, _, hess) = self.potential(z);
        let hx = hess.rows(0, n).into_owned();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        let top = self.witness.q.transpose() * &hx;
        let rest = self.antisym() * &hx;
        m.row_mut(0).copy_from(&top);
        for i in 0..n {
            m.row_mut(i + 1).copy_from(&rest.row(i));
        }
        m
    }

    /// `φ = q·Dω` and `ψ` on a node grid of one time slice.
    pub fn node_fields(&self, t: f64, nodes: usize) -> (ArrayD<f64>, Vec<ArrayD<f64>>, Vec<f64>) {
        let n = self.witness.q.len();
        let iv = &self.domain.intervals;
        let spacing: Vec<f64> = iv.iter().map(|(a, b)| (b - a) / (nodes - 1) as f64).collect();
        let h = ArrayD::from_shape_fn(IxDyn(&vec![nodes; n]), |ix| {
            let mut z: Vec<f64> = (0..n).map(|a| iv[a].0 + ix[a] as f64 * spacing[a]).collect();
            z.push(t);
            self.potential(&z).0
        });
        let (phi, psi) = pmap(&h, &spacing, &self.witness.q, &self.witness.gamma, self.witness.b);
        (phi, psi, spacing)
    }

    /// `g = 𝓡φ` on a cell grid at time `t`, with `φ` sampled at cell
    /// centres and its discrete mean removed.
    pub fn divergence_correction(&self, grid: &Grid, t: f64) -> FaceField {
        let n = self.witness.q.len();
        let mut phi = grid.sample(|x| {
            let mut z = x[..n].to_vec();
            z.push(t);
            self.omega(&z)[0]
        });
        let m = grid.mean(&phi);
        phi.iter_mut().for_each(|p| *p -= m);
        rinv_grid(grid, &phi)
    }
}

/// Settings for [`oscillation_on_box`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchOptions {
    pub samples: usize,
    pub nodes: usize,
    pub slices: usize,
    pub seed: u64,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            samples: 200_000,
            nodes: 65,
            slices: 9,
            seed: 0,
        }
    }
}

/// Build `ω = 𝒫(ρ_ε h_τ)` on `G` and measure its properties.
///
/// The collar of `ρ_ε` takes half the exceptional budget; `τ` is then
/// halved until the a-priori bounds on `‖ω‖` and on the distance of `∇ω`
/// from the segment are below `ε/2`.
pub fn oscillation_on_box(
    domain: &BoxSpec,
    witness: &RankOneWitness,
    lambda1: f64,
    lambda2: f64,
    eps: f64,
    opts: PatchOptions,
) -> Result<OscillationPatch, OscillationError> {
    let n = witness.q.len();
    if domain.dim() != n || witness.b == 0.0 || !(eps > 0.0) {
        return Err(OscillationError::InvalidPatch(format!(
            "box dim {} vs q dim {n}, b = {}, eps = {eps}",
            domain.dim(),
            witness.b
        )));
    }
    let mut axes = domain.intervals.clone();
    axes.push(domain.time.unwrap_or((0.0, 1.0)));
    let d = axes.len();
    let vol: f64 = axes.iter().map(|(a, b)| b - a).product();
    let frac = (eps / (2.0 * vol)).min(1.0);
    let c = ((1.0 - (1.0 - frac).powf(1.0 / d as f64)) / 2.0).min(0.25);
    let collar: Vec<f64> = axes.iter().map(|(a, b)| c * (b - a)).collect();
    // range of s = q·x + b t over the box
    let gs: Vec<f64> = (0..d).map(|a| if a < n { witness.q[a] } else { witness.b }).collect();
    let (mut k, mut l) = (0.0, 0.0);
    for a in 0..d {
        let (x0, x1) = axes[a];
        k += (gs[a] * x0).min(gs[a] * x1);
        l += (gs[a] * x0).max(gs[a] * x1);
    }
    let gnorm = gs.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r1 = collar
        .iter()
        .map(|w| (RAMP_D1 / (w / 2.0)).powi(2))
        .sum::<f64>()
        .sqrt();
    let r2 = {
        let d1: Vec<f64> = collar.iter().map(|w| RAMP_D1 / (w / 2.0)).collect();
        let d2: Vec<f64> = collar.iter().map(|w| RAMP_D2 / (w / 2.0).powi(2)).collect();
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += if a == b { d2[a] * d2[a] } else { d1[a] * d1[a] * d1[b] * d1[b] };
            }
        }
        s.sqrt()
    };
    let (q, g) = (&witness.q, &witness.gamma);
    let anti = (g * q.transpose() - q * g.transpose()) / witness.b;
    let c_omega = (q.norm_squared() + anti.norm_squared()).sqrt();
    let mut tau = eps;
    let tile = loop {
        let t = tile_function(k, l, lambda1, lambda2, tau)?;
        let (f, f1) = (t.sup_f(), t.sup_fp());
        let dist_bound = c_omega * (f * r2 + 2.0 * f1 * r1 * gnorm);
        let sup_bound = c_omega * (f * r1 + f1 * gnorm);
        if dist_bound <= eps / 2.0 && sup_bound <= eps / 2.0 {
            break t;
        }
        tau /= 2.0;
        if tau < 1e-300 {
            return Err(OscillationError::InfeasibleTau("no admissible tau".into()));
        }
    };
    let mut patch = OscillationPatch {
        domain: domain.clone(),
        witness: witness.clone(),
        lambda1,
        lambda2,
        tile,
        collar,
        properties: PatchProperties {
            div_psi: 0.0,
            exceptional: 0.0,
            segment_dist: 0.0,
            sup_omega: 0.0,
            slice_mean: 0.0,
        },
    };
    patch.properties = measure_patch(&patch, opts);
    Ok(patch)
}

/// Measure properties (a)–(e) of a patch.
pub fn measure_patch(patch: &OscillationPatch, opts: PatchOptions) -> PatchProperties {
    let axes = patch.axes();
    let d = axes.len();
    let vol: f64 = axes.iter().map(|(a, b)| b - a).product();
    let eta = patch.witness.eta();
    let eta2 = eta.norm_squared();
    let (l1, l2) = (patch.lambda1, patch.lambda2);
    let degenerate = l1 * l2 == 0.0;
    let (a_lo, a_hi) = patch.tile.active_range();
    let gs = patch.grad_s();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut bad = 0usize;
    let mut dist: f64 = 0.0;
    let mut sup: f64 = 0.0;
    let mut z = vec![0.0; d];
    for _ in 0..opts.samples {
        for a in 0..d {
            z[a] = rng.random_range(axes[a].0..axes[a].1);
        }
        let gw = patch.grad_omega(&z);
        let w = patch.omega(&z);
        sup = sup.max(w.amax());
        let c = (gw.dot(&eta) / eta2).clamp(-l1, l2);
        dist = dist.max((&gw - &eta * c).norm());
        let in_plateau = (0..d).all(|a| ramp(z[a], axes[a].0, axes[a].1, patch.collar[a]).0 == 1.0);
        let s: f64 = (0..d).map(|a| gs[a] * z[a]).sum();
        let active = s > a_lo && s < a_hi;
        if !degenerate && !(in_plateau && active) {
            bad += 1;
        }
    }
    let exceptional = vol * bad as f64 / opts.samples.max(1) as f64;
    let (t0, t1) = axes[d - 1];
    let mut div_psi: f64 = 0.0;
    let mut slice_mean: f64 = 0.0;
    for k in 0..opts.slices {
        let t = t0 + (t1 - t0) * k as f64 / (opts.slices - 1).max(1) as f64;
        let (phi, psi, spacing) = patch.node_fields(t, opts.nodes);
        let dv = node_divergence(&psi, &spacing);
        div_psi = div_psi.max(dv.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        let cell: f64 = spacing.iter().product();
        slice_mean = slice_mean.max((phi.sum() * cell).abs());
    }
    PatchProperties {
        div_psi,
        exceptional,
        segment_dist: dist,
        sup_omega: sup,
        slice_mean,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_examples() {
        let t = tile_function(0.0, 1.0, 1.0, 1.0, 0.1).unwrap();
        assert!(t.period <= 0.1);
        assert!(t.exceptional_fraction() < 0.1);
        assert!(t.sup_f() + t.sup_fp() < 0.1);
        let one = tile_function(0.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(one.count, 1);
        let asym = tile_function(0.0, 1.0, 1.0, 3.0, 0.1).unwrap();
        let (mut down, mut up, mut integral) = (0, 0, 0.0);
        let (a, b) = asym.active_range();
        let m = 200_000;
        for i in 0..m {
            let s = a + (b - a) * (i as f64 + 0.5) / m as f64;
            let f2 = asym.eval(s).2;
            if f2 < 0.0 {
                down += 1
            } else {
                up += 1
            }
            integral += f2 * (b - a) / m as f64;
        }
        assert!(((down as f64) / (up as f64) - 3.0).abs() < 1e-2);
        assert!(integral.abs() < 1e-3);
        assert!(tile_function(1.0, 0.0, 1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn tile_is_c1() {
        let t = tile_function(0.0, 1.0, 1.0, 2.0, 0.2).unwrap();
        let h = 1e-7;
        let (a, b) = t.active_range();
        for i in 0..997 {
            let s = a - 0.01 + (b - a + 0.02) * i as f64 / 997.0;
            let fd = (t.eval(s + h).0 - t.eval(s - h).0) / (2.0 * h);
            assert!((fd - t.eval(s).1).abs() < 1e-6);
        }
    }

    #[test]
    fn pmap_of_quadratic_has_gradient_eta() {
        let q = DVector::from_vec(vec![1.0, 0.0]);
        let g = DVector::from_vec(vec![0.0, 1.0]);
        let b = 1.0;
        let n = 9;
        let sp = vec![0.1, 0.1];
        let dt = 0.05;
        let h_at = |t: f64| {
            ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| {
                let s = ix[0] as f64 * 0.1 + b * t;
                s * s / 2.0
            })
        };
        let (p0, s0) = pmap(&h_at(0.0), &sp, &q, &g, b);
        let (p1, s1) = pmap(&h_at(dt), &sp, &q, &g, b);
        // φ_x = 1, φ_t = b, ψ_2,x = 1/b, ψ_2,t = 1 (the rows of η)
        let px = fwd(&p0, 0, 0.1, 2);
        assert!(px.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let pt = (&p1 - &p0) / dt;
        assert!(pt.iter().all(|v| (v - b).abs() < 1e-9));
        let qx = fwd(&s0[1], 0, 0.1, 2);
        assert!(qx.iter().all(|v| (v - 1.0 / b).abs() < 1e-9));
        let qt = (&s1[1] - &s0[1]) / dt;
        assert!(qt.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(s0[0].iter().all(|v| v.abs() < 1e-12));
    }
}
