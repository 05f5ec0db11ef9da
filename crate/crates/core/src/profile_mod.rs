//! Uniformly parabolic surrogate profiles.
//!
//! `σ̃` agrees with `σ` outside a modification window and replaces it inside
//! by a curve whose slope `g = σ̃'` is piecewise linear. On every piece `σ̃`
//! is quadratic, so the result is a C¹ piecewise Hermite cubic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::profiles::{Branch, Profile, ProfileError, Regime, Sigma};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModifyError {
    #[error("modification window ({r1}, {r2}) invalid: {reason}")]
    WindowInvalid { r1: f64, r2: f64, reason: String },
    #[error("construction failed at s = {s}: {detail}")]
    ConstructionFailed { s: f64, detail: String },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Which of the two surrogate constructions applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModCase {
    CaseI,
    CaseII,
}

#[derive(Debug, Clone, PartialEq)]
enum Surrogate {
    /// Knots `(x_i, g_i)` of the slope with running integrals `σ̃(x_i)`.
    Slope {
        x: Vec<f64>,
        g: Vec<f64>,
        val: Vec<f64>,
    },
    /// `σ̃ = σ`; only useful as a control.
    Identity,
}

/// A surrogate profile `σ̃` with derivative bounds `θ ≤ σ̃' ≤ Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedProfile {
    pub base: Profile,
    pub r1: f64,
    pub r2: f64,
    pub theta: f64,
    pub big_theta: f64,
    pub case: ModCase,
    /// `s₋(r1)`, where σ̃ leaves σ.
    pub a: f64,
    /// `s₊(r2)`.
    pub e: f64,
    surrogate: Surrogate,
}

impl ModifiedProfile {
    /// The unmodified profile dressed as a surrogate. It fails every strict
    /// clause of [`verify_modification`] and exists for control runs.
    pub fn unmodified(base: Profile, r1: f64, r2: f64) -> Result<Self, ModifyError> {
        let case = case_of(&base);
        let a = base.branch_inverse(r1, Branch::Minus)?;
        let e = base.branch_inverse(r2, Branch::Plus)?;
        Ok(Self {
            base,
            r1,
            r2,
            theta: 0.0,
            big_theta: f64::INFINITY,
            case,
            a,
            e,
            surrogate: Surrogate::Identity,
        })
    }

    /// Upper end of the sampling window.
    pub fn s_max(&self) -> f64 {
        self.base.s_max().max(2.0 * self.e)
    }

    fn slope_eval(&self, s: f64) -> Option<(f64, f64)> {
        let Surrogate::Slope { x, g, val } = &self.surrogate else {
            return None;
        };
        if s <= x[0] {
            return None;
        }
        let last = x.len() - 1;
        if s >= x[last] {
            return match self.case {
                ModCase::CaseI => Some((val[last] + g[last] * (s - x[last]), g[last])),
                ModCase::CaseII => None,
            };
        }
        let i = x.partition_point(|&xi| xi <= s) - 1;
        let h = s - x[i];
        let w = x[i + 1] - x[i];
        let slope = (g[i + 1] - g[i]) / w;
        Some((val[i] + g[i] * h + 0.5 * slope * h * h, g[i] + slope * h))
    }
}

impl Sigma for ModifiedProfile {
    fn sigma(&self, s: f64) -> f64 {
        match self.slope_eval(s.max(0.0)) {
            Some((v, _)) => v,
            None => self.base.sigma(s),
        }
    }
    fn sigma_prime(&self, s: f64) -> f64 {
        match self.slope_eval(s.max(0.0)) {
            Some((_, d)) => d,
            None => self.base.sigma_prime(s),
        }
    }
    fn f_zero(&self) -> f64 {
        self.base.f_zero()
    }
}

fn case_of(base: &Profile) -> ModCase {
    match base.regime() {
        Regime::PeronaMalik => ModCase::CaseI,
        Regime::Hoellig => ModCase::CaseII,
    }
}

fn knots(x: Vec<f64>, g: Vec<f64>, start: f64) -> Surrogate {
    let mut val = vec![start];
    for i in 1..x.len() {
        let v = val[i - 1] + 0.5 * (g[i] + g[i - 1]) * (x[i] - x[i - 1]);
        val.push(v);
    }
    Surrogate::Slope { x, g, val }
}

/// Build `σ̃` for the window `(r1, r2)`.
pub fn modify_profile(base: &Profile, r1: f64, r2: f64) -> Result<ModifiedProfile, ModifyError> {
    let case = case_of(base);
    let invalid = |reason: String| ModifyError::WindowInvalid { r1, r2, reason };
    let (lo, hi) = (base.valley_value(), base.peak_value());
    if !(r1 > lo && r1 < r2 && r2 < hi) {
        return Err(invalid(format!("need {lo} < r1 < r2 < {hi}")));
    }
    let a = base.branch_inverse(r1, Branch::Minus)?;
    let e = base.branch_inverse(r2, Branch::Plus)?;
    let secant = (r2 - r1) / (e - a);
    let theta0 = 0.25 * base.f_zero().min(secant);
    let da = base.sigma_prime(a);
    let de = base.sigma_prime(e);
    let mut ell = 0.25 * (e - a);
    let mut last_err = None;
    for _ in 0..40 {
        let surrogate = match case {
            ModCase::CaseI => {
                let target = 0.5 * secant.min(da);
                knots(vec![a, a + ell], vec![da, target], r1)
            }
            ModCase::CaseII => {
                let m = (r2 - r1 - 0.5 * ell * (da + de)) / (e - a - ell);
                if !(m > 0.0) {
                    ell *= 0.5;
                    continue;
                }
                knots(
                    vec![a, a + ell, e - ell, e],
                    vec![da, m, m, de],
                    r1,
                )
            }
        };
        let mut mp = ModifiedProfile {
            base: base.clone(),
            r1,
            r2,
            theta: theta0,
            big_theta: 0.0,
            case,
            a,
            e,
            surrogate,
        };
        let smax = mp.s_max();
        let n = 20_000;
        let big = (0..=n)
            .map(|i| mp.sigma_prime(smax * i as f64 / n as f64))
            .fold(0.0f64, f64::max);
        mp.big_theta = 4.0 * big;
        // Slopes below the default lower bound are accepted only when the
        // base profile itself is that flat on the untouched part.
        let untouched_min = (0..=n)
            .map(|i| smax * i as f64 / n as f64)
            .filter(|&s| s <= a || (case == ModCase::CaseII && s >= e))
            .map(|s| base.sigma_prime(s))
            .fold(f64::INFINITY, f64::min);
        mp.theta = theta0.min(0.5 * untouched_min);
        let rep = verify_modification(&mp, 4000);
        if rep.passed() {
            return Ok(mp);
        }
        last_err = rep.worst();
        ell *= 0.5;
        if ell < 1e-9 * (e - a) {
            break;
        }
    }
    let (s, detail) = last_err.unwrap_or((a, "no admissible ramp length".into()));
    Err(ModifyError::ConstructionFailed { s, detail })
}

/// One checked clause.
#[derive(Debug, Clone, PartialEq)]
pub struct ModClause {
    pub name: &'static str,
    /// Largest sampled violation (`0` when the clause holds).
    pub max_violation: f64,
    /// For strict inequalities: whether every sample was strict.
    pub strict_ok: bool,
    /// Sample where the worst violation occurred.
    pub at: f64,
}

/// Result of [`verify_modification`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModificationReport {
    pub clauses: Vec<ModClause>,
    pub min_derivative: f64,
    pub max_derivative: f64,
}

impl ModificationReport {
    pub fn passed(&self) -> bool {
        self.clauses
            .iter()
            .all(|c| c.max_violation <= 1e-9 && c.strict_ok)
    }

    fn worst(&self) -> Option<(f64, String)> {
        self.clauses
            .iter()
            .find(|c| !(c.max_violation <= 1e-9 && c.strict_ok))
            .map(|c| (c.at, format!("{} (violation {:e})", c.name, c.max_violation)))
    }
}

struct Acc {
    name: &'static str,
    worst: f64,
    at: f64,
    strict: bool,
}

impl Acc {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            worst: 0.0,
            at: f64::NAN,
            strict: true,
        }
    }
    /// Record a sample where `gap > 0` is required (strict) or `gap >= 0`.
    fn push(&mut self, s: f64, gap: f64, strict: bool) {
        let v = (-gap).max(0.0);
        if v > self.worst || (self.at.is_nan() && v > 0.0) {
            self.worst = v;
            self.at = s;
        }
        if strict && !(gap > 0.0) {
            self.strict = false;
            if self.at.is_nan() {
                self.at = s;
            }
        }
    }
    fn done(self) -> ModClause {
        ModClause {
            name: self.name,
            max_violation: self.worst,
            strict_ok: self.strict,
            at: if self.at.is_nan() { 0.0 } else { self.at },
        }
    }
}

/// Check every clause of the surrogate construction on `n_samples` points of
/// `[0, S_max]` (plus dense samples inside the window).
pub fn verify_modification(mp: &ModifiedProfile, n_samples: usize) -> ModificationReport {
    let base = &mp.base;
    let n = n_samples.max(10);
    let smax = mp.s_max();
    let a = mp.a;
    let e = mp.e;
    let mut samples: Vec<f64> = (0..=n).map(|i| smax * i as f64 / n as f64).collect();
    samples.extend((1..n).map(|i| a + (e - a) * i as f64 / n as f64));
    let mut eq = Acc::new("sigma~ = sigma outside the window");
    let mut below = Acc::new("sigma~ < sigma");
    let mut above = Acc::new("sigma~ > sigma");
    let mut bounds = Acc::new("theta <= sigma~' <= Theta");
    let mut mono = Acc::new("sigma~' > 0");
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (m2, p1) = match mp.case {
        ModCase::CaseI => (e, e),
        ModCase::CaseII => (
            base.branch_inverse(mp.r2, Branch::Minus).unwrap_or(a),
            base.branch_inverse(mp.r1, Branch::Plus).unwrap_or(e),
        ),
    };
    for &s in &samples {
        let st = mp.sigma(s);
        let sg = base.sigma(s);
        let d = mp.sigma_prime(s);
        dmin = dmin.min(d);
        dmax = dmax.max(d);
        bounds.push(s, (d - mp.theta).min(mp.big_theta - d), false);
        match mp.case {
            ModCase::CaseI => {
                mono.push(s, d, true);
                if s <= a {
                    eq.push(s, -(st - sg).abs(), false);
                } else if s < e {
                    below.push(s, sg - st, true);
                }
            }
            ModCase::CaseII => {
                if s <= a || s >= e {
                    eq.push(s, -(st - sg).abs(), false);
                } else {
                    if s <= m2 {
                        below.push(s, sg - st, true);
                    }
                    if s >= p1 {
                        above.push(s, st - sg, true);
                    }
                }
            }
        }
    }
    let mut clauses = vec![eq.done(), below.done()];
    match mp.case {
        ModCase::CaseI => clauses.push(mono.done()),
        ModCase::CaseII => clauses.push(above.done()),
    }
    clauses.push(bounds.done());
    ModificationReport {
        clauses,
        min_derivative: dmin,
        max_derivative: dmax,
    }
}

/// Sampled ellipticity constants of `Ã`: the extreme values of
/// `qᵀ DÃ(p) q / |q|²` over random `p` (with `|p| ≤ S_max`) and `q`, using
/// central differences for the Jacobian.
pub fn ellipticity_range(
    mp: &ModifiedProfile,
    dim: usize,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let smax = mp.s_max();
    let h = 1e-6;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..samples {
        let p: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-1.0..1.0) * smax / (dim as f64).sqrt())
            .collect();
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qq: f64 = q.iter().map(|x| x * x).sum();
        if qq < 1e-6 {
            continue;
        }
        let mut form = 0.0;
        for j in 0..dim {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[j] += h;
            pm[j] -= h;
            let ap = mp.flux(&pp);
            let am = mp.flux(&pm);
            for i in 0..dim {
                form += (ap[i] - am[i]) / (2.0 * h) * q[i] * q[j];
            }
        }
        let v = form / qq;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm() -> Profile {
        Profile::perona_malik_rational(1.0).unwrap()
    }

    fn pl() -> Profile {
        Profile::piecewise_hoellig(1.0, 2.0, 1.0, 0.25, 1.0).unwrap()
    }

    #[test]
    fn case_one_agrees_below_window() {
        let mp = modify_profile(&pm(), 0.3, 0.4).unwrap();
        let a = (1.0 - (1.0f64 - 0.36).sqrt()) / 0.6;
        assert!((mp.a - a).abs() < 1e-12);
        for i in 0..=50 {
            let s = a * i as f64 / 50.0;
            assert_eq!(mp.sigma(s), mp.base.sigma(s));
        }
        assert_eq!(mp.sigma(0.0), 0.0);
        let rep = verify_modification(&mp, 10_000);
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.min_derivative >= mp.theta);
        assert_eq!(rep.clauses.iter().map(|c| c.max_violation).fold(0.0, f64::max), 0.0);
    }

    #[test]
    fn case_two_rejoins() {
        let mp = modify_profile(&pl(), 0.8, 0.95).unwrap();
        assert!((mp.e - 2.2).abs() < 1e-12);
        assert_eq!(mp.case, ModCase::CaseII);
        for s in [2.2, 2.5, 3.0, 7.0] {
            assert!((mp.sigma(s) - mp.base.sigma(s)).abs() < 1e-12);
        }
        for s in [0.3, 0.8] {
            assert_eq!(mp.sigma(s), mp.base.sigma(s));
        }
        assert!(verify_modification(&mp, 10_000).passed());
    }

    #[test]
    fn identity_tamper_fails() {
        let mp = ModifiedProfile::unmodified(pm(), 0.3, 0.4).unwrap();
        let rep = verify_modification(&mp, 1000);
        assert!(!rep.passed());
        let c = rep.clauses.iter().find(|c| c.name == "sigma~ < sigma").unwrap();
        assert!(!c.strict_ok);
    }

    #[test]
    fn rejects_bad_windows() {
        assert!(matches!(
            modify_profile(&pm(), 0.4, 0.3),
            Err(ModifyError::WindowInvalid { .. })
        ));
        assert!(modify_profile(&pl(), 0.7, 0.9).is_err());
    }

    #[test]
    fn ellipticity_sampled() {
        for mp in [modify_profile(&pm(), 0.3, 0.4).unwrap(), modify_profile(&pl(), 0.8, 0.95).unwrap()] {
            let (lo, hi) = ellipticity_range(&mp, 2, 2000, 7);
            assert!(lo >= mp.theta * (1.0 - 1e-4), "{lo} < {}", mp.theta);
            assert!(hi <= mp.big_theta);
        }
    }
}
