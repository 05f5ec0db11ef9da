//! Diagnostics for candidate solutions: a weak-form residual against a
//! small cosine-polynomial test basis, conservation and min-max checks,
//! gradient-regime measures and the one-dimensional a-priori bound.

use std::f64::consts::PI;

use thiserror::Error;

use crate::convex_integration::{interface_partition, Region, Thresholds};
use crate::grid::{FaceField, FaceSeries, Grid, SpaceTimeField};
use crate::profiles::{Profile, Sigma};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerificationError {
    #[error("not applicable: {0}")]
    NotApplicable(String),
}

/// Default number of cosine modes per axis.
pub const DEFAULT_MODES: usize = 6;

/// `ζ(x, t) = ∏_a cos(k_a π (x_a − lo_a)/L_a) · t^m`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TestFn {
    k: [usize; 2],
    m: i32,
}

impl TestFn {
    fn space(&self, g: &Grid, x: [f64; 2]) -> f64 {
        (0..g.dim)
            .map(|a| (self.k[a] as f64 * PI * (x[a] - g.lo[a]) / (g.hi[a] - g.lo[a])).cos())
            .product()
    }

    fn space_grad(&self, g: &Grid, axis: usize, x: [f64; 2]) -> f64 {
        let mut out = 1.0;
        for a in 0..g.dim {
            let w = self.k[a] as f64 * PI / (g.hi[a] - g.lo[a]);
            let arg = w * (x[a] - g.lo[a]);
            out *= if a == axis { -w * arg.sin() } else { arg.cos() };
        }
        out
    }

    fn time(&self, t: f64) -> f64 {
        t.powi(self.m)
    }

    fn time_dt(&self, t: f64) -> f64 {
        if self.m == 0 {
            0.0
        } else {
            self.m as f64 * t.powi(self.m - 1)
        }
    }
}

fn fluxes(u: &SpaceTimeField, v: Option<&FaceSeries>, profile: &dyn Sigma) -> Vec<FaceField> {
    let g = &u.grid;
    (0..=g.nt)
        .map(|k| match v {
            Some(v) if k > 0 => {
                let mut f = v.slices[k].clone();
                f.axpy(-1.0, &v.slices[k - 1]);
                for c in &mut f.comps {
                    c.iter_mut().for_each(|x| *x /= g.dt());
                }
                f
            }
            Some(v) => {
                // no backward difference at t = 0; use the first step
                let mut f = v.slices[1.min(g.nt)].clone();
                f.axpy(-1.0, &v.slices[0]);
                for c in &mut f.comps {
                    c.iter_mut().for_each(|x| *x /= g.dt());
                }
                f
            }
            None => {
                let grad = g.face_gradient(&u.slices[k]);
                let norm = g.face_grad_norm(&u.slices[k]);
                FaceField {
                    comps: grad
                        .comps
                        .iter()
                        .zip(&norm.comps)
                        .map(|(d, n)| {
                            d.iter()
                                .zip(n)
                                .map(|(&d, &n)| profile.coefficient(n) * d)
                                .collect()
                        })
                        .collect(),
                }
            }
        })
        .collect()
}

/// Largest defect of the weak identity
/// `∫_Ω u(s)ζ(s) − ∫_Ω u0 ζ(0) = ∫_0^s ∫_Ω (u ζ_t − F·Dζ)` over the basis
/// `cos(kπx) t^m`, `k ≤ modes` per axis, `m ≤ 2`, and over
/// `s ∈ {T/4, T/2, 3T/4, T}` (rounded to the nearest level). The flux `F`
/// is `A(Du)` or, when `v` is given, `v_t`. Time integrals use the
/// trapezoid rule.
pub fn weak_residual(
    u: &SpaceTimeField,
    v: Option<&FaceSeries>,
    u0: &[f64],
    profile: &dyn Sigma,
    modes: usize,
) -> f64 {
    let g = &u.grid;
    let flux = fluxes(u, v, profile);
    let cells: Vec<[f64; 2]> = (0..g.cells()).map(|c| g.cell_center(c)).collect();
    let faces: Vec<Vec<[f64; 2]>> = (0..g.dim)
        .map(|a| (0..g.faces(a)).map(|f| g.face_center(a, f)).collect())
        .collect();
    let vol = g.cell_volume();
    let stops: Vec<usize> = [0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|q| ((q * g.nt as f64).round() as usize).clamp(1, g.nt))
        .collect();
    let ky = if g.dim == 2 { modes } else { 0 };
    let mut worst: f64 = 0.0;
    for kx in 0..=modes {
        for kyv in 0..=ky {
            let space: Vec<f64> = cells
                .iter()
                .map(|&x| TestFn { k: [kx, kyv], m: 0 }.space(g, x))
                .collect();
            let grads: Vec<Vec<f64>> = (0..g.dim)
                .map(|a| {
                    faces[a]
                        .iter()
                        .map(|&x| TestFn { k: [kx, kyv], m: 0 }.space_grad(g, a, x))
                        .collect()
                })
                .collect();
            // per-level pairings, independent of m
            let pair_u: Vec<f64> = u
                .slices
                .iter()
                .map(|s| s.iter().zip(&space).map(|(a, b)| a * b).sum::<f64>() * vol)
                .collect();
            let pair_f: Vec<f64> = flux
                .iter()
                .map(|f| {
                    (0..g.dim)
                        .map(|a| f.comps[a].iter().zip(&grads[a]).map(|(x, y)| x * y).sum::<f64>())
                        .sum::<f64>()
                        * vol
                })
                .collect();
            let init: f64 = u0.iter().zip(&space).map(|(a, b)| a * b).sum::<f64>() * vol;
            for m in 0..=2 {
                let tf = TestFn { k: [kx, kyv], m };
                let integrand: Vec<f64> = (0..=g.nt)
                    .map(|k| {
                        let t = g.time(k);
                        pair_u[k] * tf.time_dt(t) - pair_f[k] * tf.time(t)
                    })
                    .collect();
                let mut acc = 0.0;
                let mut next = 0;
                for k in 1..=g.nt {
                    acc += 0.5 * g.dt() * (integrand[k - 1] + integrand[k]);
                    while next < stops.len() && stops[next] == k {
                        let lhs = pair_u[k] * tf.time(g.time(k)) - init * tf.time(0.0);
                        worst = worst.max((lhs - acc).abs());
                        next += 1;
                    }
                }
            }
        }
    }
    worst
}

/// `max_k |∑u^k − ∑u0| · |cell|`.
pub fn mass_drift(u: &SpaceTimeField, u0: &[f64]) -> f64 {
    let g = &u.grid;
    let m0 = g.mass(u0);
    u.slices
        .iter()
        .map(|s| (g.mass(s) - m0).abs())
        .fold(0.0, f64::max)
}

/// `max(0, max u − max u0, min u0 − min u)`.
pub fn minmax_check(u: &SpaceTimeField, u0: &[f64]) -> f64 {
    let (lo, hi) = u0
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (ulo, uhi) = u
        .slices
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    0.0f64.max(uhi - hi).max(lo - ulo)
}

/// Measures of the gradient regimes over levels `1..=nt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeMeasures {
    /// `|{s₋(r̄) ≤ |Du| ≤ s₋(r)} ∩ Ω_T^2|` (Case II: lower end `s₋(r̄1)`).
    pub s: f64,
    /// Case-appropriate large-gradient band inside `Ω_T^2`.
    pub l: f64,
    /// Rest of `Ω_T^2`.
    pub neither: f64,
    /// `|Ω_T^1|`, `|Ω_T^2|`, `|Ω_T^3|`.
    pub omega: [f64; 3],
    /// `(|S| + |L|) / |Ω_T^2|`, or 1 when `Ω_T^2` is empty.
    pub band_fraction: f64,
    /// Measure of `Ω_T^2` pixels whose `|Du|` is within `slack` of a band
    /// end but outside the band.
    pub slack_measure: f64,
    pub slack: f64,
}

/// Gradient-regime measures of `u` with the partition taken from `u*`.
/// `slack` widens the bands only for the `slack_measure` column.
pub fn regime_measures(
    u: &SpaceTimeField,
    u_star: &SpaceTimeField,
    th: &Thresholds,
    slack: f64,
) -> RegimeMeasures {
    let g = &u.grid;
    let part = interface_partition(u_star, th);
    let w = g.cell_volume() * g.dt();
    let (mut s, mut l, mut neither, mut near) = (0.0, 0.0, 0.0, 0.0);
    let inb = |x: f64, (a, b): (f64, f64), e: f64| x >= a - e && x <= b + e;
    for k in 1..=g.nt {
        let norms = g.face_grad_norm(&u.slices[k]).comps.concat();
        for (f, &x) in norms.iter().enumerate() {
            if part.labels[k][f] != Region::Two {
                continue;
            }
            if inb(x, th.s_band, 0.0) {
                s += w;
            } else if inb(x, th.l_band, 0.0) {
                l += w;
            } else {
                neither += w;
                if inb(x, th.s_band, slack) || inb(x, th.l_band, slack) {
                    near += w;
                }
            }
        }
    }
    let o2 = s + l + neither;
    RegimeMeasures {
        s,
        l,
        neither,
        omega: part.measure,
        band_fraction: if o2 > 0.0 { (s + l) / o2 } else { 1.0 },
        slack_measure: near,
        slack,
    }
}

/// Outcome of [`apriori_check_1d`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriCheck {
    /// `‖u_x‖_∞ · c / ‖σ(|u0'|)‖_∞`, zero for a constant datum.
    pub ratio: f64,
    pub c: f64,
    pub flagged: bool,
}

/// Compare `‖u_x‖_∞` with `‖σ(|u0'|)‖_∞ / c`, `c = inf σ(s)/s`.
pub fn apriori_check_1d(
    u: &SpaceTimeField,
    u0: &[f64],
    profile: &Profile,
) -> Result<AprioriCheck, VerificationError> {
    let g = &u.grid;
    if g.dim != 1 {
        return Err(VerificationError::NotApplicable("needs one space dimension".into()));
    }
    let c = profile.inf_ratio();
    if !(c > 0.0) {
        return Err(VerificationError::NotApplicable(format!(
            "inf sigma(s)/s = {c} is not positive"
        )));
    }
    let ux = u.slices.iter().map(|s| g.face_grad_norm(s).max_abs()).fold(0.0, f64::max);
    let bound = g.face_grad_norm(u0).comps[0]
        .iter()
        .map(|&s| profile.sigma(s))
        .fold(0.0, f64::max);
    let ratio = if bound == 0.0 { 0.0 } else { ux * c / bound };
    Ok(AprioriCheck {
        ratio,
        c,
        flagged: ratio > 1.02,
    })
}

/// Everything the verification module measures for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub weak_residual: f64,
    pub mass_drift: f64,
    pub minmax_violation: f64,
    pub regime: Option<RegimeMeasures>,
    pub apriori_ratio: Option<f64>,
    pub notes: Vec<String>,
}

impl VerificationReport {
    pub const CSV_HEADER: &'static str =
        "weak_residual,mass_drift,minmax_violation,s,l,neither,omega1,omega2,omega3,apriori_ratio";

    pub fn csv_row(&self) -> String {
        let r = self.regime;
        let f = |x: Option<f64>| x.map_or(String::from("nan"), |v| format!("{v:.16e}"));
        format!(
            "{:.16e},{:.16e},{:.16e},{},{},{},{},{},{},{}",
            self.weak_residual,
            self.mass_drift,
            self.minmax_violation,
            f(r.map(|r| r.s)),
            f(r.map(|r| r.l)),
            f(r.map(|r| r.neither)),
            f(r.map(|r| r.omega[0])),
            f(r.map(|r| r.omega[1])),
            f(r.map(|r| r.omega[2])),
            f(self.apriori_ratio),
        )
    }
}

impl std::fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "weak residual     {:.4e}", self.weak_residual)?;
        writeln!(f, "mass drift        {:.4e}", self.mass_drift)?;
        writeln!(f, "min-max violation {:.4e}", self.minmax_violation)?;
        if let Some(r) = &self.regime {
            writeln!(
                f,
                "|S| {:.4e}  |L| {:.4e}  neither {:.4e}  (band fraction {:.4})",
                r.s, r.l, r.neither, r.band_fraction
            )?;
            writeln!(
                f,
                "|Omega^1| {:.4e}  |Omega^2| {:.4e}  |Omega^3| {:.4e}",
                r.omega[0], r.omega[1], r.omega[2]
            )?;
        }
        if let Some(a) = self.apriori_ratio {
            writeln!(f, "a-priori ratio    {a:.4}")?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

/// Build a report for `u` (datum mean included) against `u0`.
pub fn verify(
    u: &SpaceTimeField,
    u0: &[f64],
    profile: &Profile,
    regimes: Option<(&SpaceTimeField, &Thresholds)>,
) -> VerificationReport {
    let mut notes = Vec::new();
    let apriori = if u.grid.dim == 1 {
        match apriori_check_1d(u, u0, profile) {
            Ok(a) => {
                if a.flagged {
                    notes.push(format!("a-priori ratio {:.4} exceeds 1.02", a.ratio));
                }
                Some(a.ratio)
            }
            Err(e) => {
                notes.push(e.to_string());
                None
            }
        }
    } else {
        None
    };
    let slack = u.grid.h(0);
    VerificationReport {
        weak_residual: weak_residual(u, None, u0, profile, DEFAULT_MODES),
        mass_drift: mass_drift(u, u0),
        minmax_violation: minmax_check(u, u0),
        regime: regimes.map(|(us, th)| regime_measures(u, us, th, slack)),
        apriori_ratio: apriori,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::pde::solve_neumann_ibvp;
    use crate::profiles::Linear;

    #[test]
    fn constant_test_function_is_mass() {
        let g = Grid::new_1d(32, 0.0, 1.0, 10, 0.1).unwrap();
        let u0 = g.sample(|x| x[0] * x[0]);
        let u = solve_neumann_ibvp(&Linear, &u0, &g).unwrap();
        assert!(weak_residual(&u, None, &u0, &Linear, 0) < 1e-12);
        assert!(mass_drift(&u, &u0) < 1e-13);
    }

    #[test]
    fn minmax_detects_spike() {
        let g = Grid::new_1d(16, 0.0, 1.0, 4, 0.1).unwrap();
        let u0 = g.sample(|x| x[0]);
        let mut u = SpaceTimeField::constant(&g, 0.5);
        assert_eq!(minmax_check(&u, &u0), 0.0);
        let top = u0.iter().cloned().fold(f64::MIN, f64::max);
        u.slices[2][3] = top + 0.1;
        assert!((minmax_check(&u, &u0) - 0.1).abs() < 1e-14);
    }
}
