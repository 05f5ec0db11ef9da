//! Staged surgery in one space dimension.
//!
//! Pixels are pairs `(face f, level k)`, `k ≥ 1`, carrying `Du` at level
//! `k` and `v_t = (v^k − v^{k−1})/dt`. A box is a run of faces `f0..=f1`
//! over levels `k0..=k1`. On each level of a box a face potential `H`
//! with `H(f0) = H(f1) = 0` is added to `v` and its difference quotient
//! to `u`, so `div v = u` is kept exactly and `Du` moves by the second
//! difference of `H`. The increments are chosen so that every face lands
//! near one of the two rank-one endpoints `s±(|v_t|)` of its pixel.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{FaceSeries, Grid, SpaceTimeField};
use crate::pde::{build_boundary_function, PdeError};
use crate::profile_mod::{ModCase, ModifiedProfile};
use crate::profiles::{Branch, Profile, Sigma};
use crate::rankone::{membership_s, solve_rank_one, RankOneError, WindowParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("good set covers {fraction:.3e} of the non-classical region; no boxes")]
    NoBoxes { fraction: f64 },
    #[error("rank-one witness failed on box {box_id}: {error}")]
    WitnessFailure { box_id: usize, error: RankOneError },
    #[error(transparent)]
    Pde(#[from] PdeError),
}

/// Band parameters: `r̄ < r̃ = r1 < r = r2` (Case I) and additionally
/// `r < r̄3` (Case II).
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub case: ModCase,
    pub rbar: f64,
    pub rtilde: f64,
    pub r: f64,
    pub rbar3: Option<f64>,
    /// `s₋(r̄)`.
    pub lower: f64,
    /// `s₊(r̄3)` in Case II.
    pub upper: Option<f64>,
    pub s_band: (f64, f64),
    pub l_band: (f64, f64),
}

impl Thresholds {
    pub fn new(w: &WindowParams, rbar: f64, rbar3: Option<f64>) -> Result<Self, PipelineError> {
        let prof = &w.profile;
        let inv = |r: f64, b: Branch| {
            prof.branch_inverse(r, b)
                .map_err(|e| PipelineError::Precondition(e.to_string()))
        };
        match w.case {
            ModCase::CaseI => {
                if !(rbar > 0.0 && rbar < w.r1) {
                    return Err(PipelineError::Precondition(format!(
                        "need 0 < rbar < r~ = {}, got {rbar}",
                        w.r1
                    )));
                }
                let lower = inv(rbar, Branch::Minus)?;
                Ok(Self {
                    case: w.case,
                    rbar,
                    rtilde: w.r1,
                    r: w.r2,
                    rbar3: None,
                    lower,
                    upper: None,
                    s_band: (lower, w.radii.sm2),
                    l_band: (w.radii.sp2, w.radii.sp1),
                })
            }
            ModCase::CaseII => {
                let r3 = rbar3.ok_or_else(|| {
                    PipelineError::Precondition("Case II needs rbar3".into())
                })?;
                let lo = prof.valley_value();
                let hi = prof.peak_value();
                if !(rbar > lo && rbar < w.r1 && r3 > w.r2 && r3 < hi) {
                    return Err(PipelineError::Precondition(format!(
                        "need {lo} < rbar1 < {} and {} < rbar3 < {hi}, got ({rbar}, {r3})",
                        w.r1, w.r2
                    )));
                }
                let lower = inv(rbar, Branch::Minus)?;
                let upper = inv(r3, Branch::Plus)?;
                Ok(Self {
                    case: w.case,
                    rbar,
                    rtilde: w.r1,
                    r: w.r2,
                    rbar3: Some(r3),
                    lower,
                    upper: Some(upper),
                    s_band: (lower, w.radii.sm2),
                    l_band: (w.radii.sp1, upper),
                })
            }
        }
    }

    /// The two `|p|`-intervals of `𝒞`; they coincide with the bands `S`, `L`.
    pub fn c_intervals(&self) -> [(f64, f64); 2] {
        [self.s_band, self.l_band]
    }
}

/// Region of a pixel with respect to `|Du*|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    One,
    Two,
    Three,
    /// On the level set `|Du*| = s₋(r̄)` (or `s₊(r̄3)`).
    Interface,
}

/// Pixel labels for every level, with face-flattened indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub labels: Vec<Vec<Region>>,
    /// Measures of `Ω_T^1`, `Ω_T^2`, `Ω_T^3` over levels `1..=nt`.
    pub measure: [f64; 3],
    /// Fraction of pixels within `tolerance` of a threshold.
    pub band_fraction: f64,
    pub tolerance: f64,
    pub suggestion: Option<String>,
}

fn face_norms(grid: &Grid, u: &[f64]) -> Vec<f64> {
    grid.face_grad_norm(u).comps.concat()
}

/// Split space-time by strict inequalities on `|Du*|`.
pub fn interface_partition(u_star: &SpaceTimeField, th: &Thresholds) -> Partition {
    let grid = &u_star.grid;
    let norms: Vec<Vec<f64>> = u_star.slices.iter().map(|s| face_norms(grid, s)).collect();
    let mut tol: f64 = 0.0;
    for g in &norms {
        for w in g.windows(2) {
            tol = tol.max((w[1] - w[0]).abs() / 2.0);
        }
    }
    let mut near = 0usize;
    let mut total = 0usize;
    let mut measure = [0.0; 3];
    let weight = grid.cell_volume() * grid.dt();
    let labels: Vec<Vec<Region>> = norms
        .iter()
        .enumerate()
        .map(|(k, g)| {
            g.iter()
                .map(|&s| {
                    let lab = if s < th.lower {
                        Region::One
                    } else if s == th.lower {
                        Region::Interface
                    } else {
                        match th.upper {
                            Some(up) if s > up => Region::Three,
                            Some(up) if s == up => Region::Interface,
                            _ => Region::Two,
                        }
                    };
                    if k > 0 {
                        total += 1;
                        let close = (s - th.lower).abs() <= tol
                            || th.upper.is_some_and(|up| (s - up).abs() <= tol);
                        if close && s > 0.0 {
                            near += 1;
                        }
                        match lab {
                            Region::One => measure[0] += weight,
                            Region::Two => measure[1] += weight,
                            Region::Three => measure[2] += weight,
                            Region::Interface => {}
                        }
                    }
                    lab
                })
                .collect()
        })
        .collect();
    let band_fraction = near as f64 / total.max(1) as f64;
    let suggestion = (band_fraction > 0.01).then(|| {
        format!(
            "{:.2}% of pixels lie within {tol:.3e} of a threshold; perturb rbar",
            100.0 * band_fraction
        )
    });
    Partition {
        labels,
        measure,
        band_fraction,
        tolerance: tol,
        suggestion,
    }
}

/// Current fields of the construction; `u` has the datum mean removed.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub grid: Grid,
    pub u: SpaceTimeField,
    pub v: FaceSeries,
    pub mean: f64,
    pub u_star: SpaceTimeField,
    pub v_star: FaceSeries,
    pub partition: Partition,
    pub thresholds: Thresholds,
    /// `‖u*_t‖_∞ + 1`.
    pub m: f64,
    pub residual_history: Vec<f64>,
    pub stage: usize,
}

impl PipelineState {
    fn nx(&self) -> usize {
        self.grid.n[0]
    }

    pub fn du(&self, k: usize, f: usize) -> f64 {
        let u = &self.u.slices[k];
        (u[f] - u[f - 1]) / self.grid.h(0)
    }

    pub fn vt(&self, k: usize, f: usize) -> f64 {
        (self.v.slices[k].comps[0][f] - self.v.slices[k - 1].comps[0][f]) / self.grid.dt()
    }

    /// `u` with the datum mean restored.
    pub fn u_full(&self) -> SpaceTimeField {
        SpaceTimeField {
            grid: self.grid.clone(),
            slices: self
                .u
                .slices
                .iter()
                .map(|s| s.iter().map(|x| x + self.mean).collect())
                .collect(),
        }
    }
}

fn pixels(grid: &Grid) -> impl Iterator<Item = (usize, usize)> {
    let (nt, nx) = (grid.nt, grid.n[0]);
    (1..=nt).flat_map(move |k| (1..nx).map(move |f| (k, f)))
}

/// `∫ |v_t − A(Du)|` over the pixels.
pub fn flux_residual(state: &PipelineState, profile: &dyn Sigma) -> f64 {
    let w = state.grid.h(0) * state.grid.dt();
    pixels(&state.grid)
        .map(|(k, f)| (state.vt(k, f) - profile.flux1(state.du(k, f))).abs())
        .sum::<f64>()
        * w
}

/// Distance from `(P, B)` to `{(s, σ(s)) : s ∈ [lo, hi]}`.
pub fn dist_to_graph(profile: &dyn Sigma, p: f64, b: f64, lo: f64, hi: f64) -> f64 {
    let d2 = |s: f64| {
        let e = profile.sigma(s) - b;
        (s - p) * (s - p) + e * e
    };
    let n = 48;
    let step = (hi - lo) / n as f64;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=n {
        let s = lo + step * i as f64;
        let v = d2(s);
        if v < best.0 {
            best = (v, s);
        }
    }
    let (mut a, mut c) = ((best.1 - step).max(lo), (best.1 + step).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..40 {
        let x1 = c - g * (c - a);
        let x2 = a + g * (c - a);
        if d2(x1) < d2(x2) {
            c = x2;
        } else {
            a = x1;
        }
    }
    best.0.min(d2(0.5 * (a + c))).sqrt()
}

/// `dist((p, β), 𝒞)` for a 1D pixel.
pub fn dist_to_c(profile: &dyn Sigma, th: &Thresholds, p: f64, beta: f64) -> f64 {
    let (pa, ba) = if p < 0.0 { (-p, -beta) } else { (p, beta) };
    th.c_intervals()
        .iter()
        .map(|&(lo, hi)| dist_to_graph(profile, pa, ba, lo, hi))
        .fold(f64::INFINITY, f64::min)
}

/// One-dimensional description of `𝒮`: `sgn β = sgn p`, `r1 < |β| < r2`,
/// `s₋(|β|) < |p| < s₊(|β|)`. Returns the endpoint radii and the distance
/// to `∂𝒮` when inside.
fn inside_s(w: &WindowParams, p: f64, beta: f64) -> Option<(f64, f64, f64)> {
    if p * beta <= 0.0 {
        return None;
    }
    let (pa, ba) = (p.abs(), beta.abs());
    if !(ba > w.r1 && ba < w.r2) {
        return None;
    }
    let sm = w.profile.branch_inverse(ba, Branch::Minus).ok()?;
    let sp = w.profile.branch_inverse(ba, Branch::Plus).ok()?;
    if !(pa > sm && pa < sp) {
        return None;
    }
    let seg = |r: f64, lo: f64, hi: f64| {
        let dp = if pa < lo {
            lo - pa
        } else if pa > hi {
            pa - hi
        } else {
            0.0
        };
        (dp * dp + (ba - r) * (ba - r)).sqrt()
    };
    let (ml, mh) = w.minus_interval();
    let (pl, ph) = w.plus_interval();
    let d = seg(w.r1, w.radii.sm1, w.radii.sp1)
        .min(seg(w.r2, w.radii.sm2, w.radii.sp2))
        .min(dist_to_graph(&w.profile, pa, ba, ml, mh))
        .min(dist_to_graph(&w.profile, pa, ba, pl, ph));
    Some((sm, sp, d))
}

/// `(p, β) ∈ 𝒢_τ`.
pub fn in_good_set(w: &WindowParams, th: &Thresholds, p: f64, beta: f64, tau: f64) -> bool {
    match inside_s(w, p, beta) {
        Some((_, _, d)) => d > tau && dist_to_c(&w.profile, th, p, beta) > tau,
        None => false,
    }
}

/// Parameters of a single stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams {
    pub eps: f64,
    pub rho: f64,
    /// Margin of the good set `𝒢_τ`.
    pub tau: f64,
    /// Relative pull of the targets from `s±` back towards the pixel.
    pub shrink: f64,
    pub min_faces: usize,
    pub max_boxes: usize,
    /// Number of trailing faces whose phases are searched exhaustively.
    pub tail: usize,
    pub seed: u64,
    pub membership_samples: usize,
}

/// Box `f0..=f1 × k0..=k1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub f0: usize,
    pub f1: usize,
    pub k0: usize,
    pub k1: usize,
}

impl BoxRegion {
    pub fn faces(&self) -> usize {
        self.f1 - self.f0 + 1
    }
    pub fn pixels(&self) -> usize {
        self.faces() * (self.k1 - self.k0 + 1)
    }
}

/// What happened in one stage (stage 0 describes `(u*, v*)`).
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub eps: f64,
    pub rho: f64,
    pub tau: f64,
    pub boxes: usize,
    pub patched_fraction: f64,
    pub residual: f64,
    pub dist_c: f64,
    pub s_measure: f64,
    pub l_measure: f64,
    pub omega2_measure: f64,
    pub sup_delta_u: f64,
    pub l1_delta_du: f64,
    pub max_ut: f64,
    pub m: f64,
    pub mass_drift: f64,
    pub minmax_violation: f64,
    pub omega1_exact: bool,
    pub div_defect: f64,
    pub membership_fraction: f64,
    pub oscillation_exceeded: usize,
    pub skipped_rho: usize,
    /// Boxes whose patch did not lower the local residual and was undone.
    pub rejected: usize,
    pub no_boxes: bool,
}

/// `|S|` and `|L|` inside `Ω_T^2`, plus the measure of the rest of `Ω_T^2`.
pub fn band_measures(state: &PipelineState) -> (f64, f64, f64) {
    let th = &state.thresholds;
    let w = state.grid.h(0) * state.grid.dt();
    let (mut s, mut l, mut rest) = (0.0, 0.0, 0.0);
    for (k, f) in pixels(&state.grid) {
        if state.partition.labels[k][f] != Region::Two {
            continue;
        }
        let g = state.du(k, f).abs();
        if g >= th.s_band.0 && g <= th.s_band.1 {
            s += w;
        } else if g >= th.l_band.0 && g <= th.l_band.1 {
            l += w;
        } else {
            rest += w;
        }
    }
    (s, l, rest)
}

fn measure_stage(
    state: &PipelineState,
    prev: Option<&PipelineState>,
    u0_range: (f64, f64),
    w: &WindowParams,
) -> StageReport {
    let grid = &state.grid;
    let (nt, nx) = (grid.nt, state.nx());
    let (h, dt) = (grid.h(0), grid.dt());
    let prof = &w.profile;
    let th = &state.thresholds;
    let mut dist_c = 0.0;
    for (k, f) in pixels(grid) {
        if state.partition.labels[k][f] == Region::Two {
            dist_c += dist_to_c(prof, th, state.du(k, f), state.vt(k, f)) * h * dt;
        }
    }
    let (s, l, rest) = band_measures(state);
    let (mut sup_du, mut l1) = (0.0f64, 0.0);
    if let Some(p) = prev {
        for k in 0..=nt {
            for c in 0..nx {
                sup_du = sup_du.max((state.u.slices[k][c] - p.u.slices[k][c]).abs());
            }
        }
        for (k, f) in pixels(grid) {
            l1 += (state.du(k, f) - p.du(k, f)).abs() * h * dt;
        }
    }
    let mut max_ut: f64 = 0.0;
    for k in 1..=nt {
        for c in 0..nx {
            max_ut = max_ut.max((state.u.slices[k][c] - state.u.slices[k - 1][c]).abs() / dt);
        }
    }
    let m0: f64 = state.u.slices[0].iter().sum();
    let mass_drift = state
        .u
        .slices
        .iter()
        .map(|s| (s.iter().sum::<f64>() - m0).abs() * h)
        .fold(0.0, f64::max);
    let (lo, hi) = u0_range;
    let mut minmax: f64 = 0.0;
    for sl in &state.u.slices {
        for &x in sl {
            let x = x + state.mean;
            minmax = minmax.max(x - hi).max(lo - x);
        }
    }
    let mut exact = true;
    for k in 0..=nt {
        for f in 1..nx {
            if state.partition.labels[k][f] == Region::One
                || state.partition.labels[k][f] == Region::Three
            {
                for c in [f - 1, f] {
                    if state.u.slices[k][c].to_bits() != state.u_star.slices[k][c].to_bits() {
                        exact = false;
                    }
                }
            }
        }
    }
    let mut div_defect: f64 = 0.0;
    for k in 0..=nt {
        let d = grid.divergence(&state.v.slices[k]);
        for c in 0..nx {
            div_defect = div_defect.max((d[c] - state.u.slices[k][c]).abs());
        }
    }
    StageReport {
        stage: state.stage,
        eps: 0.0,
        rho: 0.0,
        tau: 0.0,
        boxes: 0,
        patched_fraction: 0.0,
        residual: flux_residual(state, prof),
        dist_c,
        s_measure: s,
        l_measure: l,
        omega2_measure: s + l + rest,
        sup_delta_u: sup_du,
        l1_delta_du: l1,
        max_ut,
        m: state.m,
        mass_drift,
        minmax_violation: minmax,
        omega1_exact: exact,
        div_defect,
        membership_fraction: f64::NAN,
        oscillation_exceeded: 0,
        skipped_rho: 0,
        rejected: 0,
        no_boxes: false,
    }
}

/// Largest all-`true` rectangle of `mask` (levels `1..=nt`, faces
/// `1..nx`) at least `min` faces wide, by the histogram method.
fn largest_rectangle(mask: &[Vec<bool>], nx: usize, min: usize) -> Option<BoxRegion> {
    let nt = mask.len() - 1;
    let mut height = vec![0usize; nx + 1];
    let mut best: Option<(usize, BoxRegion)> = None;
    for k in 1..=nt {
        for f in 1..nx {
            height[f] = if mask[k][f] { height[f] + 1 } else { 0 };
        }
        // bars at faces 1..nx−1, sentinel at nx
        let mut stack: Vec<usize> = Vec::new();
        for f in 1..=nx {
            let hf = if f < nx { height[f] } else { 0 };
            while let Some(&top) = stack.last() {
                if height[top] < hf {
                    break;
                }
                stack.pop();
                let left = stack.last().map_or(1, |&s| s + 1);
                let width = f - left;
                let hh = height[top];
                if hh > 0 && width >= min {
                    let area = width * hh;
                    if best.as_ref().is_none_or(|b| area > b.0) {
                        best = Some((
                            area,
                            BoxRegion {
                                f0: left,
                                f1: f - 1,
                                k0: k + 1 - hh,
                                k1: k,
                            },
                        ));
                    }
                }
            }
            stack.push(f);
        }
    }
    best.map(|b| b.1)
}

/// Cover the good pixels by boxes: maximal all-good rectangles are taken
/// greedily, then halved along the longer side until the oscillation of
/// `(Du, v_t)` about the centre pixel is below `δ/2 = 2ε`. Pieces that
/// reach `min_faces` faces and one level are kept and counted as exceeding
/// the bound.
fn cover(
    state: &PipelineState,
    good: &[Vec<bool>],
    params: &StageParams,
) -> (Vec<BoxRegion>, usize) {
    let half_delta = 2.0 * params.eps;
    let min = params.min_faces.max(2);
    let nx = state.nx();
    let mut mask = good.to_vec();
    let mut exceeded = 0;
    let mut boxes = Vec::new();
    while boxes.len() < params.max_boxes {
        let Some(rect) = largest_rectangle(&mask, nx, min) else {
            break;
        };
        for row in &mut mask[rect.k0..=rect.k1] {
            row[rect.f0..=rect.f1].fill(false);
        }
        let mut stack = vec![rect];
        while let Some(bx) = stack.pop() {
            let (kc, fc) = ((bx.k0 + bx.k1) / 2, (bx.f0 + bx.f1) / 2);
            let (pc, bc) = (state.du(kc, fc), state.vt(kc, fc));
            let mut osc: f64 = 0.0;
            for k in bx.k0..=bx.k1 {
                for f in bx.f0..=bx.f1 {
                    osc = osc
                        .max((state.du(k, f) - pc).abs())
                        .max((state.vt(k, f) - bc).abs());
                }
            }
            let levels = bx.k1 - bx.k0 + 1;
            let split_x = bx.faces() >= 2 * min;
            if osc < half_delta || (!split_x && levels < 2) {
                if osc >= half_delta {
                    exceeded += 1;
                }
                boxes.push(bx);
            } else if split_x && (levels < 2 || bx.faces() >= levels) {
                let c = bx.f0 + bx.faces() / 2 - 1;
                stack.push(BoxRegion { f1: c, ..bx });
                stack.push(BoxRegion { f0: c + 1, ..bx });
            } else {
                let c = bx.k0 + levels / 2 - 1;
                stack.push(BoxRegion { k1: c, ..bx });
                stack.push(BoxRegion { k0: c + 1, ..bx });
            }
        }
    }
    boxes.truncate(params.max_boxes);
    boxes.sort_by_key(|b| (b.k0, b.f0));
    (boxes, exceeded)
}

/// Increments `δ_j` for the phase pattern, corrected by the least-norm
/// affine term on a subset of faces so that `∑δ = ∑ jδ = 0`, and the potential `H` built from
/// them. Returns `(δ, H, sup_j h|G_j|)`.
fn potential(p: &[f64], lo: &[f64], hi: &[f64], up: &[bool], hx: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let w = p.len();
    let mut delta: Vec<f64> = (0..w)
        .map(|j| if up[j] { hi[j] - p[j] } else { lo[j] - p[j] })
        .collect();
    // The correction lives on the faces sent towards `hi`, whose band is
    // the wider one; with fewer than two such faces it uses all faces.
    let support: Vec<usize> = if up.iter().filter(|&&u| u).count() >= 2 {
        (0..w).filter(|&j| up[j]).collect()
    } else {
        (0..w).collect()
    };
    let ns = support.len() as f64;
    let jbar = support.iter().sum::<usize>() as f64 / ns;
    let var: f64 = support.iter().map(|&j| (j as f64 - jbar).powi(2)).sum();
    let s0: f64 = delta.iter().sum();
    let m1: f64 = delta.iter().enumerate().map(|(j, d)| j as f64 * d).sum();
    let alpha = -s0 / ns;
    let slope = if var > 0.0 {
        (-m1 - alpha * ns * jbar) / var
    } else {
        0.0
    };
    for &j in &support {
        delta[j] += alpha + slope * (j as f64 - jbar);
    }
    let mut h = vec![0.0; w];
    let mut g = 0.0;
    let mut sup_g: f64 = 0.0;
    for j in 0..w {
        g += delta[j];
        sup_g = sup_g.max(g.abs());
        if j + 1 < w {
            h[j + 1] = h[j] + hx * hx * g;
        }
    }
    h[w - 1] = 0.0;
    (delta, h, sup_g * hx)
}

/// Phase pattern for one level: second-order modulation of the increments
/// towards `lo`/`hi`, with the trailing `tail` faces searched exhaustively
/// for the smallest flux mismatch `∑|β − A(p + δ)|`.
fn choose_phases(
    p: &[f64],
    beta: &[f64],
    lo: &[f64],
    hi: &[f64],
    dither: f64,
    tail: usize,
    hx: f64,
    profile: &dyn Sigma,
) -> Vec<bool> {
    let w = p.len();
    let tail = tail.min(w / 3).max(2.min(w));
    let head = w - tail;
    let mut phase = vec![false; w];
    let (mut i1, mut i2) = (0.0, 0.0);
    for j in 0..head {
        let scale = hi[j] - lo[j];
        let score = |up: bool| {
            let d = if up { hi[j] - p[j] } else { lo[j] - p[j] };
            let a = i1 + d;
            let b = i2 + a;
            (b + 2.0 * a + dither * scale).powi(2)
        };
        let up = score(true) < score(false);
        phase[j] = up;
        i1 += if up { hi[j] - p[j] } else { lo[j] - p[j] };
        i2 += i1;
    }
    let mut best = (f64::INFINITY, phase.clone());
    for mask in 0u32..(1u32 << tail) {
        for j in head..w {
            phase[j] = mask >> (j - head) & 1 == 1;
        }
        let (delta, _, _) = potential(p, lo, hi, &phase, hx);
        let cost: f64 = (0..w)
            .map(|j| (beta[j] - profile.flux1(p[j] + delta[j])).abs())
            .sum();
        if cost < best.0 {
            best = (cost, phase.clone());
        }
    }
    best.1
}

/// One stage of surgery on the good set.
pub fn single_stage(
    state: &PipelineState,
    w: &WindowParams,
    params: &StageParams,
) -> Result<(PipelineState, StageReport), PipelineError> {
    let grid = &state.grid;
    let (nt, nx) = (grid.nt, state.nx());
    let hx = grid.h(0);
    let prof = &w.profile;
    let th = &state.thresholds;
    let mut good = vec![vec![false; nx + 1]; nt + 1];
    let mut omega2 = 0usize;
    for (k, f) in pixels(grid) {
        if state.partition.labels[k][f] == Region::Two {
            omega2 += 1;
            good[k][f] = in_good_set(w, th, state.du(k, f), state.vt(k, f), params.tau);
        }
    }
    let (boxes, exceeded) = cover(state, &good, params);
    let covered: usize = boxes.iter().map(|b| b.pixels()).sum();
    let fraction = covered as f64 / omega2.max(1) as f64;
    if fraction < 0.01 {
        return Err(PipelineError::NoBoxes { fraction });
    }
    let mut next = state.clone();
    next.stage = state.stage + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let shrink = params.shrink;
    let mut skipped = 0;
    let mut rejected = 0;
    let mut patched = 0usize;
    let mut patched_pixels = Vec::new();
    for (id, bx) in boxes.iter().enumerate() {
        // witness at the box centre
        let (kc, fc) = ((bx.k0 + bx.k1) / 2, (bx.f0 + bx.f1) / 2);
        let pc = DVector::from_element(1, state.du(kc, fc));
        let bc = DVector::from_element(1, state.vt(kc, fc));
        let sol = solve_rank_one(&pc, &bc, w, None)
            .map_err(|error| PipelineError::WitnessFailure { box_id: id, error })?;
        let _b = 0.5 * params.rho / (sol.witness.t_plus - sol.witness.t_minus);
        let dither: f64 = rng.random_range(-0.5..0.5);
        let wf = bx.faces();
        let level_data = |k: usize| {
            let mut p = Vec::with_capacity(wf);
            let mut beta = Vec::with_capacity(wf);
            let mut lo = Vec::with_capacity(wf);
            let mut hi = Vec::with_capacity(wf);
            for f in bx.f0..=bx.f1 {
                let (pf, bf) = (state.du(k, f), state.vt(k, f));
                let sg = pf.signum();
                let ba = bf.abs();
                let sm = prof.branch_inverse(ba, Branch::Minus).unwrap_or(pf.abs());
                let sp = prof.branch_inverse(ba, Branch::Plus).unwrap_or(pf.abs());
                // targets pulled slightly back into 𝒮
                lo.push(pf + (1.0 - shrink) * (sg * sm - pf));
                hi.push(pf + (1.0 - shrink) * (sg * sp - pf));
                p.push(pf);
                beta.push(bf);
            }
            (p, beta, lo, hi)
        };
        // one lamination pattern per box, so that H varies slowly in time
        let (p, beta, lo, hi) = level_data(kc);
        let phases = choose_phases(&p, &beta, &lo, &hi, dither, params.tail, hx, prof);
        let mut levels = Vec::with_capacity(bx.k1 - bx.k0 + 1);
        let mut sup_phi: f64 = 0.0;
        for k in bx.k0..=bx.k1 {
            let (p, _, lo, hi) = level_data(k);
            let (_, h, s) = potential(&p, &lo, &hi, &phases, hx);
            sup_phi = sup_phi.max(s);
            levels.push(h);
        }
        if sup_phi >= params.rho {
            skipped += 1;
            continue;
        }
        let local = |st: &PipelineState| {
            let mut r = 0.0;
            for k in bx.k0..=(bx.k1 + 1).min(nt) {
                for f in bx.f0..=bx.f1 {
                    r += (st.vt(k, f) - prof.flux1(st.du(k, f))).abs();
                }
            }
            r
        };
        let before = local(&next);
        let saved: Vec<(Vec<f64>, Vec<f64>)> = (bx.k0..=bx.k1)
            .map(|k| {
                (
                    next.u.slices[k][bx.f0..bx.f1].to_vec(),
                    next.v.slices[k].comps[0][bx.f0..=bx.f1].to_vec(),
                )
            })
            .collect();
        for (i, k) in (bx.k0..=bx.k1).enumerate() {
            let h = &levels[i];
            for j in 0..wf {
                let f = bx.f0 + j;
                next.v.slices[k].comps[0][f] += h[j];
                if j + 1 < wf {
                    next.u.slices[k][f] += (h[j + 1] - h[j]) / hx;
                }
            }
        }
        if local(&next) >= before {
            for (i, k) in (bx.k0..=bx.k1).enumerate() {
                next.u.slices[k][bx.f0..bx.f1].copy_from_slice(&saved[i].0);
                next.v.slices[k].comps[0][bx.f0..=bx.f1].copy_from_slice(&saved[i].1);
            }
            rejected += 1;
            continue;
        }
        for k in bx.k0..=bx.k1 {
            patched_pixels.extend((bx.f0..=bx.f1).map(|f| (k, f)));
        }
        patched += bx.pixels();
    }
    let mut report = measure_stage(&next, Some(state), u0_range(state), w);
    report.eps = params.eps;
    report.rho = params.rho;
    report.tau = params.tau;
    report.boxes = boxes.len() - skipped - rejected;
    report.rejected = rejected;
    report.patched_fraction = patched as f64 / omega2.max(1) as f64;
    report.oscillation_exceeded = exceeded;
    report.skipped_rho = skipped;
    if !patched_pixels.is_empty() && params.membership_samples > 0 {
        let mut hits = 0;
        for _ in 0..params.membership_samples {
            let (k, f) = patched_pixels[rng.random_range(0..patched_pixels.len())];
            let p = DVector::from_element(1, next.du(k, f));
            let b = DVector::from_element(1, next.vt(k, f));
            if membership_s(&p, &b, w).inside {
                hits += 1;
            }
        }
        report.membership_fraction = hits as f64 / params.membership_samples as f64;
    }
    next.residual_history.push(report.residual);
    Ok((next, report))
}

fn u0_range(state: &PipelineState) -> (f64, f64) {
    let s = &state.u_star.slices[0];
    let lo = s.iter().cloned().fold(f64::INFINITY, f64::min) + state.mean;
    let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + state.mean;
    (lo, hi)
}

/// Knobs of [`run_pipeline`] beyond the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// `τ_j = tau_scale · diam · tau_ratio^{j−1}`.
    pub tau_scale: f64,
    pub tau_ratio: f64,
    /// Target pull `κ_j = shrink_scale · ε_j`.
    pub shrink_scale: f64,
    pub min_faces: usize,
    pub max_boxes: usize,
    pub tail: usize,
    pub seed: u64,
    pub membership_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_scale: 0.01,
            tau_ratio: 0.25,
            shrink_scale: 0.05,
            min_faces: 6,
            max_boxes: 4096,
            tail: 8,
            seed: 0,
            membership_samples: 64,
        }
    }
}

/// `ε_j = ε₀ 2^{−j}`, `ρ_j = ρ₀ 2^{−(j−1)}` for `j = 1..=n`.
pub fn default_schedule(eps0: f64, rho0: f64, n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|j| (eps0 * 0.5f64.powi(j as i32), rho0 * 0.5f64.powi(j as i32 - 1)))
        .collect()
}

/// Result of a pipeline run. The report is complete up to `failure`.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub state: PipelineState,
    pub stages: Vec<StageReport>,
    pub failure: Option<PipelineError>,
    pub notes: Vec<String>,
}

/// Diameter of the `(|p|, |β|)` bounding box of `𝒮`.
pub fn s_diameter(w: &WindowParams) -> f64 {
    (w.p_bound() - w.radii.sm1).hypot(w.r2 - w.r1)
}

/// Build `(u*, v*)`, partition, and run the stages of `schedule`.
pub fn run_pipeline(
    mp: &ModifiedProfile,
    u0: &[f64],
    grid: &Grid,
    w: &WindowParams,
    rbar: f64,
    rbar3: Option<f64>,
    schedule: &[(f64, f64)],
    cfg: &PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    if grid.dim != 1 {
        return Err(PipelineError::Precondition(
            "the staged construction is implemented for one space dimension".into(),
        ));
    }
    if (mp.r1 - w.r1).abs() > 1e-12 || (mp.r2 - w.r2).abs() > 1e-12 {
        return Err(PipelineError::Precondition(
            "modified profile and window disagree".into(),
        ));
    }
    let th = Thresholds::new(w, rbar, rbar3)?;
    let prof: &Profile = &w.profile;
    let g0 = grid.face_grad_norm(u0).max_abs();
    match w.case {
        ModCase::CaseI => {
            if !(w.r2 < prof.sigma(g0)) {
                return Err(PipelineError::Precondition(format!(
                    "need r < sigma(M0) = {}, got r = {}",
                    prof.sigma(g0),
                    w.r2
                )));
            }
        }
        ModCase::CaseII => {
            let t = prof
                .uniqueness_threshold()
                .map_err(|e| PipelineError::Precondition(e.to_string()))?;
            let s2_star = match prof.critical() {
                crate::profiles::Critical::H { s2_star, .. } => s2_star,
                _ => f64::INFINITY,
            };
            let hit = grid
                .face_grad_norm(u0)
                .comps[0]
                .iter()
                .any(|&g| g > t.s1_star && g < s2_star);
            if !hit {
                return Err(PipelineError::Precondition(format!(
                    "need |Du0| in ({}, {s2_star}) somewhere",
                    t.s1_star
                )));
            }
        }
    }
    let bf = build_boundary_function(mp, u0, grid)?;
    let partition = interface_partition(&bf.u_star, &th);
    let dt = grid.dt();
    let mut ut_max: f64 = 0.0;
    for k in 1..=grid.nt {
        for c in 0..grid.n[0] {
            ut_max = ut_max.max((bf.u_star.slices[k][c] - bf.u_star.slices[k - 1][c]).abs() / dt);
        }
    }
    let mut notes = Vec::new();
    if let Some(s) = &partition.suggestion {
        notes.push(s.clone());
    }
    let mut state = PipelineState {
        grid: grid.clone(),
        u: bf.u_star.clone(),
        v: bf.v_star.clone(),
        mean: bf.mean,
        u_star: bf.u_star,
        v_star: bf.v_star,
        partition,
        thresholds: th,
        m: ut_max + 1.0,
        residual_history: Vec::new(),
        stage: 0,
    };
    let mut r0 = measure_stage(&state, None, u0_range(&state), w);
    state.residual_history.push(r0.residual);
    r0.membership_fraction = f64::NAN;
    let mut stages = vec![r0];
    let diam = s_diameter(w);
    let mut failure = None;
    for (j, &(eps, rho)) in schedule.iter().enumerate() {
        let jj = j + 1;
        let params = StageParams {
            eps,
            rho,
            tau: cfg.tau_scale * diam * cfg.tau_ratio.powi(jj as i32 - 1),
            shrink: cfg.shrink_scale * eps,
            min_faces: cfg.min_faces,
            max_boxes: cfg.max_boxes,
            tail: cfg.tail,
            seed: cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(jj as u64),
            membership_samples: cfg.membership_samples,
        };
        match single_stage(&state, w, &params) {
            Ok((next, rep)) => {
                if rep.max_ut >= next.m {
                    notes.push(format!(
                        "stage {jj}: max |u_t| = {:.3e} exceeds m = {:.3e}",
                        rep.max_ut, next.m
                    ));
                }
                state = next;
                stages.push(rep);
            }
            Err(PipelineError::NoBoxes { fraction }) => {
                notes.push(format!("stage {jj}: no boxes (good fraction {fraction:.3e})"));
                state.stage += 1;
                let mut rep = measure_stage(&state, None, u0_range(&state), w);
                rep.eps = eps;
                rep.rho = rho;
                rep.tau = params.tau;
                rep.no_boxes = true;
                state.residual_history.push(rep.residual);
                stages.push(rep);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    Ok(PipelineRun {
        state,
        stages,
        failure,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulator_keeps_both_integrals_bounded() {
        let w = 200;
        let p: Vec<f64> = (0..w).map(|j| 1.0 + 0.5 * (j as f64 / 30.0).sin()).collect();
        let lo: Vec<f64> = vec![0.45; w];
        let hi: Vec<f64> = vec![2.3; w];
        let beta = vec![0.37; w];
        let prof = Profile::perona_malik_rational(1.0).unwrap();
        let hx = 1.0 / 256.0;
        let up = choose_phases(&p, &beta, &lo, &hi, 0.1, 8, hx, &prof);
        let (delta, h, sup_phi) = potential(&p, &lo, &hi, &up, hx);
        let hmax = h.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(hmax / (hx * hx) < 40.0, "{hmax}");
        assert!(sup_phi / hx < 5.0);
        assert_eq!(h[0], 0.0);
        assert_eq!(h[w - 1], 0.0);
        assert!(delta.iter().sum::<f64>().abs() < 1e-12);
        // Du moves to near the targets
        let mut off = 0;
        for j in 1..w - 1 {
            let d = p[j] + (h[j + 1] - 2.0 * h[j] + h[j - 1]) / (hx * hx);
            if (d - 0.45).abs().min((d - 2.3).abs()) > 0.05 {
                off += 1;
            }
        }
        assert!(off <= 2, "{off}");
    }
}
