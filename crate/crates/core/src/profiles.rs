//! Diffusion profiles `σ(s) = s f(s²)` and the fluxes `A(p) = f(|p|²) p`.
//!
//! Two hypothesis classes are supported. A Perona-Malik profile rises on
//! `[0, s0)` and decays to zero beyond `s0`; a Höllig profile rises on
//! `[0, s1)`, falls on `(s1, s2)` and rises again with bounded slope.

use std::fmt;

use thiserror::Error;

/// Errors raised by profile construction and queries.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("r = {r} outside the admissible interval [{lo}, {hi}] of the {branch:?} branch")]
    OutOfRange {
        r: f64,
        lo: f64,
        hi: f64,
        branch: Branch,
    },
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

/// Monotone branch of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Below the first peak.
    Minus,
    /// Above the peak (PM) or above the valley (Höllig).
    Plus,
}

/// Family tag of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    PeronaMalik,
    Hoellig,
    PiecewiseLinearHoellig,
    Custom,
}

/// Which structural hypothesis a profile satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// One hump: Case I.
    PeronaMalik,
    /// Rise, fall, rise: Case II.
    Hoellig,
}

/// Critical radii of a profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Critical {
    Pm { s0: f64 },
    H {
        s1: f64,
        s2: f64,
        s1_star: f64,
        s2_star: f64,
    },
}

impl Critical {
    /// Largest critical radius, used to size sampling windows.
    pub fn max_radius(&self) -> f64 {
        match *self {
            Critical::Pm { s0 } => s0,
            Critical::H { s2_star, .. } => s2_star,
        }
    }
}

/// Anything with a scalar profile. The solver and verification layers only
/// need `σ`, `σ'` and the limit `f(0) = lim σ(s)/s`.
pub trait Sigma: Send + Sync {
    fn sigma(&self, s: f64) -> f64;
    fn sigma_prime(&self, s: f64) -> f64;
    /// `f(0) = lim_{s→0} σ(s)/s`.
    fn f_zero(&self) -> f64;

    /// `f(s²) = σ(s)/s`, continuous at `s = 0`.
    fn coefficient(&self, s: f64) -> f64 {
        if s < 1e-12 {
            self.f_zero()
        } else {
            self.sigma(s) / s
        }
    }

    /// `A(p) = f(|p|²) p`.
    fn flux(&self, p: &[f64]) -> Vec<f64> {
        let s = norm(p);
        let f = self.coefficient(s);
        p.iter().map(|x| f * x).collect()
    }

    /// Scalar flux in one space dimension.
    fn flux1(&self, p: f64) -> f64 {
        self.coefficient(p.abs()) * p
    }
}

/// The heat profile `σ(s) = s`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Linear;

impl Sigma for Linear {
    fn sigma(&self, s: f64) -> f64 {
        s
    }
    fn sigma_prime(&self, _s: f64) -> f64 {
        1.0
    }
    fn f_zero(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    PmExp { s0: f64 },
    PmRational { s0: f64 },
    /// `s - kappa * S((s - a)/(b - a))` with the quintic smoothstep `S`.
    HoelligSmooth { a: f64, b: f64, kappa: f64 },
    PiecewiseLinear {
        s1: f64,
        s2: f64,
        k1: f64,
        k2: f64,
        k3: f64,
    },
    /// Monotone cubic (Fritsch-Carlson) interpolation of tabulated data.
    Table {
        s: Vec<f64>,
        sigma: Vec<f64>,
        slope: Vec<f64>,
    },
}

/// A diffusion profile together with its critical radii.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    kind: ProfileKind,
    regime: Regime,
    shape: Shape,
    critical: Critical,
    f0: f64,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.shape {
            Shape::PmExp { s0 } => write!(f, "pm-exp(s0={s0})"),
            Shape::PmRational { s0 } => write!(f, "pm-rational(s0={s0})"),
            Shape::HoelligSmooth { a, b, kappa } => {
                write!(f, "hoellig-smooth(a={a},b={b},kappa={kappa})")
            }
            Shape::PiecewiseLinear { s1, s2, k1, k2, k3 } => {
                write!(f, "hoellig-pl(s1={s1},s2={s2},k1={k1},k2={k2},k3={k3})")
            }
            Shape::Table { s, .. } => write!(f, "custom({} nodes)", s.len()),
        }
    }
}

pub(crate) fn norm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn smoothstep5(u: f64) -> (f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0)
    } else if u >= 1.0 {
        (1.0, 0.0)
    } else {
        let v = u * u * u * (u * (6.0 * u - 15.0) + 10.0);
        let d = 30.0 * u * u * (u - 1.0) * (u - 1.0);
        (v, d)
    }
}

impl Profile {
    /// `σ(s) = s exp(-s²/(2 s0²))`.
    pub fn perona_malik_exp(s0: f64) -> Result<Self, ProfileError> {
        if !(s0 > 0.0 && s0.is_finite()) {
            return Err(ProfileError::InvalidProfile(format!("s0 = {s0}")));
        }
        Ok(Self {
            kind: ProfileKind::PeronaMalik,
            regime: Regime::PeronaMalik,
            shape: Shape::PmExp { s0 },
            critical: Critical::Pm { s0 },
            f0: 1.0,
        })
    }

    /// `σ(s) = s / (1 + (s/s0)²)`.
    pub fn perona_malik_rational(s0: f64) -> Result<Self, ProfileError> {
        if !(s0 > 0.0 && s0.is_finite()) {
            return Err(ProfileError::InvalidProfile(format!("s0 = {s0}")));
        }
        Ok(Self {
            kind: ProfileKind::PeronaMalik,
            regime: Regime::PeronaMalik,
            shape: Shape::PmRational { s0 },
            critical: Critical::Pm { s0 },
            f0: 1.0,
        })
    }

    /// Smooth Höllig profile `s - kappa S((s-a)/(b-a))`; it has a falling
    /// stretch inside `(a, b)` whenever `kappa > 8(b-a)/15`.
    pub fn hoellig_smooth(a: f64, b: f64, kappa: f64) -> Result<Self, ProfileError> {
        if !(a > 0.0 && b > a && kappa > 8.0 * (b - a) / 15.0 && kappa < a) {
            return Err(ProfileError::InvalidProfile(format!(
                "need 0 < a < b, 8(b-a)/15 < kappa < a; got a={a}, b={b}, kappa={kappa}"
            )));
        }
        let mut p = Self {
            kind: ProfileKind::Hoellig,
            regime: Regime::Hoellig,
            shape: Shape::HoelligSmooth { a, b, kappa },
            critical: Critical::Pm { s0: 0.0 },
            f0: 1.0,
        };
        p.critical = p.detect_critical(4.0 * b)?;
        Ok(p)
    }

    /// Piecewise-linear Höllig profile: slope `k1` up to `s1`, slope `-k2`
    /// on `(s1, s2)`, slope `k3` afterwards.
    pub fn piecewise_hoellig(
        s1: f64,
        s2: f64,
        k1: f64,
        k2: f64,
        k3: f64,
    ) -> Result<Self, ProfileError> {
        if !(s1 > 0.0 && s2 > s1 && k1 > 0.0 && k2 >= 0.0 && k3 > 0.0) {
            return Err(ProfileError::InvalidProfile(format!(
                "need 0 < s1 < s2 and k1, k3 > 0, k2 >= 0; got ({s1}, {s2}, {k1}, {k2}, {k3})"
            )));
        }
        let valley = k1 * s1 - k2 * (s2 - s1);
        if valley < 0.0 {
            return Err(ProfileError::InvalidProfile(format!(
                "sigma(s2) = {valley} < 0"
            )));
        }
        let peak = k1 * s1;
        let s1_star = valley / k1;
        let s2_star = s2 + (peak - valley) / k3;
        Ok(Self {
            kind: ProfileKind::PiecewiseLinearHoellig,
            regime: Regime::Hoellig,
            shape: Shape::PiecewiseLinear { s1, s2, k1, k2, k3 },
            critical: Critical::H {
                s1,
                s2,
                s1_star,
                s2_star,
            },
            f0: k1,
        })
    }

    /// Tabulated profile. The first node must be `(0, 0)`; the hypothesis
    /// class is detected from the monotonicity pattern of the data.
    pub fn custom(s: Vec<f64>, sigma: Vec<f64>) -> Result<Self, ProfileError> {
        if s.len() < 4 || s.len() != sigma.len() {
            return Err(ProfileError::InvalidProfile(
                "need at least 4 (s, sigma) pairs of equal length".into(),
            ));
        }
        if s[0] != 0.0 || sigma[0] != 0.0 {
            return Err(ProfileError::InvalidProfile(
                "table must start at (0, 0)".into(),
            ));
        }
        if s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ProfileError::InvalidProfile(
                "s nodes must be strictly increasing".into(),
            ));
        }
        let slope = pchip_slopes(&s, &sigma);
        let mut p = Self {
            kind: ProfileKind::Custom,
            regime: Regime::PeronaMalik,
            shape: Shape::Table { s, sigma, slope },
            critical: Critical::Pm { s0: 0.0 },
            f0: 0.0,
        };
        p.f0 = richardson_f0(&p);
        let smax = match &p.shape {
            Shape::Table { s, .. } => *s.last().unwrap(),
            _ => unreachable!(),
        };
        p.critical = p.detect_critical(smax)?;
        p.regime = match p.critical {
            Critical::Pm { .. } => Regime::PeronaMalik,
            Critical::H { .. } => Regime::Hoellig,
        };
        Ok(p)
    }

    pub fn kind(&self) -> ProfileKind {
        self.kind
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn critical(&self) -> Critical {
        self.critical
    }

    /// Piecewise-linear parameters `(s1, s2, k1, k2, k3)`, if applicable.
    pub fn piecewise_params(&self) -> Option<(f64, f64, f64, f64, f64)> {
        match self.shape {
            Shape::PiecewiseLinear { s1, s2, k1, k2, k3 } => Some((s1, s2, k1, k2, k3)),
            _ => None,
        }
    }

    /// Sampling window `[0, S_max]` with `S_max = 4 · max critical radius`.
    pub fn s_max(&self) -> f64 {
        4.0 * self.critical.max_radius()
    }

    /// Peak value `σ(s0)` (PM) or `σ(s1)` (Höllig).
    pub fn peak_value(&self) -> f64 {
        match self.critical {
            Critical::Pm { s0 } => self.sigma(s0),
            Critical::H { s1, .. } => self.sigma(s1),
        }
    }

    /// Lower end of the branch-inverse interval: `0` (PM) or `σ(s2)` (Höllig).
    pub fn valley_value(&self) -> f64 {
        match self.critical {
            Critical::Pm { .. } => 0.0,
            Critical::H { s2, .. } => self.sigma(s2),
        }
    }

    fn detect_critical(&self, search: f64) -> Result<Critical, ProfileError> {
        let n = 10_000;
        let ds = search / n as f64;
        let d: Vec<f64> = (0..=n)
            .map(|i| self.sigma_prime((i as f64 + 0.5) * ds))
            .collect();
        let mut changes = Vec::new();
        for i in 0..n {
            if (d[i] > 0.0) != (d[i + 1] > 0.0) {
                changes.push(i);
            }
        }
        let refine = |i: usize| -> f64 {
            let a = (i as f64 + 0.5) * ds;
            let b = a + ds;
            bisect(|s| self.sigma_prime(s), a, b)
        };
        match (d[0] > 0.0, changes.len()) {
            (true, 1) => {
                let s0 = golden_refine(self, refine(changes[0]), ds);
                Ok(Critical::Pm { s0 })
            }
            (true, 2) => {
                let s1 = refine(changes[0]);
                let s2 = refine(changes[1]);
                let lo = self.sigma(s2);
                let hi = self.sigma(s1);
                if hi <= lo {
                    return Err(ProfileError::HypothesisViolated(
                        "sigma(s1) <= sigma(s2)".into(),
                    ));
                }
                let s1_star = if lo <= 0.0 {
                    0.0
                } else {
                    bisect(|s| self.sigma(s) - lo, 0.0, s1)
                };
                let mut up = 2.0 * s2;
                while self.sigma(up) < hi {
                    up *= 2.0;
                    if up > 1e12 {
                        return Err(ProfileError::HypothesisViolated(
                            "sigma never returns to sigma(s1)".into(),
                        ));
                    }
                }
                let s2_star = bisect(|s| self.sigma(s) - hi, s2, up);
                Ok(Critical::H {
                    s1,
                    s2,
                    s1_star,
                    s2_star,
                })
            }
            _ => Err(ProfileError::HypothesisViolated(format!(
                "monotonicity pattern not recognised ({} sign changes of sigma')",
                changes.len()
            ))),
        }
    }

    /// Critical radii, recomputed by golden-section / bisection search.
    pub fn critical_points(&self) -> Result<Critical, ProfileError> {
        match self.shape {
            Shape::PiecewiseLinear { .. } => Ok(self.critical),
            _ => self.detect_critical(self.s_max().max(1.0)),
        }
    }

    /// Unique `s` on the requested monotone branch with `σ(s) = r`.
    pub fn branch_inverse(&self, r: f64, branch: Branch) -> Result<f64, ProfileError> {
        let tol = 1e-13;
        match self.critical {
            Critical::Pm { s0 } => {
                let peak = self.sigma(s0);
                if !(r > 0.0 && r <= peak + tol) {
                    return Err(ProfileError::OutOfRange {
                        r,
                        lo: 0.0,
                        hi: peak,
                        branch,
                    });
                }
                if r >= peak {
                    return Ok(s0);
                }
                match branch {
                    Branch::Minus => Ok(bisect(|s| self.sigma(s) - r, 0.0, s0)),
                    Branch::Plus => {
                        let mut up = 2.0 * s0;
                        while self.sigma(up) > r {
                            up *= 2.0;
                        }
                        Ok(bisect(|s| self.sigma(s) - r, s0, up))
                    }
                }
            }
            Critical::H {
                s1,
                s2,
                s1_star,
                s2_star,
            } => {
                let lo = self.sigma(s2);
                let hi = self.sigma(s1);
                if !(r >= lo - tol && r <= hi + tol) {
                    return Err(ProfileError::OutOfRange { r, lo, hi, branch });
                }
                let r = r.clamp(lo, hi);
                if let Shape::PiecewiseLinear { s1, s2, k1, k3, .. } = self.shape {
                    return Ok(match branch {
                        Branch::Minus => r / k1,
                        Branch::Plus => s2 + (r - lo) / k3,
                    }
                    .clamp(0.0, if branch == Branch::Minus { s1 } else { s2_star }));
                }
                match branch {
                    Branch::Minus => Ok(bisect(|s| self.sigma(s) - r, s1_star, s1)),
                    Branch::Plus => Ok(bisect(|s| self.sigma(s) - r, s2, s2_star)),
                }
            }
        }
    }

    /// Closed-form breakdown-of-uniqueness data `(M0^l, s1*, c)` for a
    /// piecewise-linear Höllig profile.
    pub fn uniqueness_threshold(&self) -> Result<UniquenessThreshold, ProfileError> {
        let Shape::PiecewiseLinear { s1, s2, k1, k2, k3 } = self.shape else {
            return Err(ProfileError::InvalidProfile(
                "uniqueness threshold needs a piecewise-linear Hoellig profile".into(),
            ));
        };
        let valley = -k2 * (s2 - s1) + k1 * s1;
        if valley <= 0.0 {
            return Err(ProfileError::InvalidProfile(format!(
                "positivity -k2(s2-s1)+k1 s1 = {valley} fails"
            )));
        }
        let s1_star = -s2 * k2 / k1 + s1 * (1.0 + k2 / k1);
        let c = (valley / s2).min(k3);
        let m0 = if valley < k3 * s2 {
            -s1 * k2 / k1 + (s1 * s1 / s2) * (1.0 + k2 / k1)
        } else {
            s1 * k3 / k1
        };
        Ok(UniquenessThreshold {
            m0_l: m0,
            s1_star,
            c,
        })
    }

    /// Validate the structural hypothesis by dense sampling on `[0, S_max]`.
    pub fn validate(&self) -> HypothesisReport {
        let n = 10_000;
        let smax = self.s_max();
        let sign_tol = 1e-9;
        let mut clauses = Vec::new();
        let mut flags = Vec::new();
        let sample = |i: usize| smax * i as f64 / n as f64;
        clauses.push(Clause::new(
            "sigma(0) = 0",
            self.sigma(0.0).abs() <= 1e-14,
            self.sigma(0.0).abs(),
        ));
        match self.critical {
            Critical::Pm { s0 } => {
                let excl = 1e-6;
                let mut rise = 0.0f64;
                let mut fall = 0.0f64;
                for i in 1..n {
                    let s = sample(i);
                    if (s - s0).abs() < excl {
                        continue;
                    }
                    let d = self.sigma_prime(s);
                    if s < s0 {
                        rise = rise.max(-d);
                    } else {
                        fall = fall.max(d);
                    }
                }
                clauses.push(Clause::new("sigma' > 0 on [0, s0)", rise < sign_tol, rise.max(0.0)));
                clauses.push(Clause::new("sigma' < 0 on (s0, inf)", fall < sign_tol, fall.max(0.0)));
                let far = self.sigma(100.0 * s0.max(1.0));
                clauses.push(Clause::new(
                    "sigma -> 0 at large s",
                    far < 0.05 * self.sigma(s0),
                    far,
                ));
            }
            Critical::H {
                s1,
                s2,
                s1_star,
                s2_star,
            } => {
                let mut bad = 0.0f64;
                for i in 1..n {
                    let s = sample(i);
                    if (s - s1).abs() < 1e-6 || (s - s2).abs() < 1e-6 {
                        continue;
                    }
                    if s < s1 || s > s2 {
                        bad = bad.max(-self.sigma_prime(s));
                    }
                }
                clauses.push(Clause::new(
                    "sigma' > 0 on [0, s1) and (s2, inf)",
                    bad < sign_tol,
                    bad.max(0.0),
                ));
                let gap = self.sigma(s1) - self.sigma(s2);
                clauses.push(Clause::new(
                    "sigma(s1) > sigma(s2) >= 0",
                    gap > 0.0 && self.sigma(s2) >= -1e-14,
                    (-gap).max(0.0),
                ));
                let (mut lam, mut big) = (f64::INFINITY, 0.0f64);
                for i in 0..=n {
                    let s = 2.0 * s2 + (smax.max(4.0 * s2) - 2.0 * s2) * i as f64 / n as f64;
                    let d = self.sigma_prime(s);
                    lam = lam.min(d);
                    big = big.max(d);
                }
                clauses.push(Clause::new(
                    "lambda <= sigma' <= Lambda on [2 s2, S_max]",
                    lam > 0.0 && big.is_finite(),
                    (-lam).max(0.0),
                ));
                let e1 = (self.sigma(s1_star) - self.sigma(s2)).abs();
                let e2 = (self.sigma(s2_star) - self.sigma(s1)).abs();
                clauses.push(Clause::new(
                    "sigma(s1*) = sigma(s2), sigma(s2*) = sigma(s1)",
                    e1 <= 1e-10 && e2 <= 1e-10,
                    e1.max(e2),
                ));
                if self.sigma(s2) <= 1e-14 {
                    flags.push(
                        "sigma(s2) = 0: s1* = 0 and the Minus branch interval degenerates".into(),
                    );
                }
            }
        }
        let mut pos = 0.0f64;
        for i in 0..=n {
            let s = sample(i);
            pos = pos.max(-(self.sigma(s) * s));
        }
        clauses.push(Clause::new("sigma(s) s >= 0", pos <= 0.0, pos));
        HypothesisReport { clauses, flags }
    }

    /// Infimum of `σ(s)/s` over `s > 0`; closed form for piecewise-linear
    /// profiles, dense sampling otherwise.
    pub fn inf_ratio(&self) -> f64 {
        if let Ok(t) = self.uniqueness_threshold() {
            return t.c;
        }
        let smax = 25.0 * self.critical.max_radius();
        let n = 100_000;
        (1..=n)
            .map(|i| {
                let s = smax * i as f64 / n as f64;
                self.sigma(s) / s
            })
            .fold(self.f0, f64::min)
    }
}

/// Breakdown-of-uniqueness data for a piecewise-linear Höllig profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniquenessThreshold {
    pub m0_l: f64,
    pub s1_star: f64,
    pub c: f64,
}

/// One checked hypothesis clause.
#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub name: &'static str,
    pub ok: bool,
    pub violation: f64,
}

impl Clause {
    fn new(name: &'static str, ok: bool, violation: f64) -> Self {
        Self {
            name,
            ok,
            violation,
        }
    }
}

/// Result of [`Profile::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub clauses: Vec<Clause>,
    /// Admissible but degenerate situations worth reporting.
    pub flags: Vec<String>,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.ok)
    }
}

impl Sigma for Profile {
    fn sigma(&self, s: f64) -> f64 {
        let s = s.max(0.0);
        match &self.shape {
            Shape::PmExp { s0 } => s * (-(s * s) / (2.0 * s0 * s0)).exp(),
            Shape::PmRational { s0 } => s / (1.0 + (s / s0) * (s / s0)),
            Shape::HoelligSmooth { a, b, kappa } => {
                s - kappa * smoothstep5((s - a) / (b - a)).0
            }
            Shape::PiecewiseLinear { s1, s2, k1, k2, k3 } => {
                if s <= *s1 {
                    k1 * s
                } else if s <= *s2 {
                    k1 * s1 - k2 * (s - s1)
                } else {
                    k1 * s1 - k2 * (s2 - s1) + k3 * (s - s2)
                }
            }
            Shape::Table { s: xs, sigma, slope } => table_eval(xs, sigma, slope, s).0,
        }
    }

    fn sigma_prime(&self, s: f64) -> f64 {
        let s = s.max(0.0);
        match &self.shape {
            Shape::PmExp { s0 } => {
                let a = s / s0;
                (1.0 - a * a) * (-(a * a) / 2.0).exp()
            }
            Shape::PmRational { s0 } => {
                let a = (s / s0) * (s / s0);
                (1.0 - a) / ((1.0 + a) * (1.0 + a))
            }
            Shape::HoelligSmooth { a, b, kappa } => {
                1.0 - kappa * smoothstep5((s - a) / (b - a)).1 / (b - a)
            }
            Shape::PiecewiseLinear { s1, s2, k1, k2, k3 } => {
                if s < *s1 {
                    *k1
                } else if s < *s2 {
                    -k2
                } else {
                    *k3
                }
            }
            Shape::Table { s: xs, sigma, slope } => table_eval(xs, sigma, slope, s).1,
        }
    }

    fn f_zero(&self) -> f64 {
        self.f0
    }
}

/// Evaluate the flux `A(p)` of a profile.
pub fn eval_flux(profile: &dyn Sigma, p: &[f64]) -> Vec<f64> {
    profile.flux(p)
}

/// Bisection for a sign change of `g` on `[a, b]`, to about `1e-14`.
pub(crate) fn bisect<F: Fn(f64) -> f64>(g: F, mut a: f64, mut b: f64) -> f64 {
    let ga = g(a);
    if ga == 0.0 {
        return a;
    }
    let neg_left = ga < 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b || (b - a) <= 1e-15 * b.abs().max(1.0) {
            break;
        }
        let gm = g(m);
        if gm == 0.0 {
            return m;
        }
        if (gm < 0.0) == neg_left {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Golden-section refinement of the argmax around `guess`, followed by a
/// bisection polish on the derivative.
fn golden_refine(p: &Profile, guess: f64, width: f64) -> f64 {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = ((guess - 2.0 * width).max(0.0), guess + 2.0 * width);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    while (b - a) > 1e-10 {
        if p.sigma(c) > p.sigma(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - phi * (b - a);
        d = a + phi * (b - a);
    }
    let (lo, hi) = (a - 1e-6, b + 1e-6);
    if (p.sigma_prime(lo) > 0.0) && (p.sigma_prime(hi) < 0.0) {
        bisect(|s| p.sigma_prime(s), lo, hi)
    } else {
        0.5 * (a + b)
    }
}

fn richardson_f0(p: &Profile) -> f64 {
    let h = 1e-3 * p.s_probe();
    let r1 = p.sigma(h) / h;
    let r2 = p.sigma(h / 2.0) / (h / 2.0);
    2.0 * r2 - r1
}

impl Profile {
    fn s_probe(&self) -> f64 {
        match &self.shape {
            Shape::Table { s, .. } => s[1],
            _ => 1.0,
        }
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        if del[i - 1] * del[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let v = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if v * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && v.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            v
        }
    };
    if n > 2 {
        d[0] = end(h[0], h[1], del[0], del[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    } else {
        d[0] = del[0];
        d[1] = del[0];
    }
    d
}

fn table_eval(x: &[f64], y: &[f64], d: &[f64], s: f64) -> (f64, f64) {
    let n = x.len();
    if s >= x[n - 1] {
        let m = d[n - 1];
        if m >= 0.0 {
            return (y[n - 1] + m * (s - x[n - 1]), m);
        }
        let v = y[n - 1] * x[n - 1] / s;
        return (v, -v / s);
    }
    let i = match x.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    };
    let h = x[i + 1] - x[i];
    let t = (s - x[i]) / h;
    let (t2, t3) = (t * t, t * t * t);
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let v = h00 * y[i] + h10 * h * d[i] + h01 * y[i + 1] + h11 * h * d[i + 1];
    let dv = ((6.0 * t2 - 6.0 * t) * y[i]
        + (3.0 * t2 - 4.0 * t + 1.0) * h * d[i]
        + (-6.0 * t2 + 6.0 * t) * y[i + 1]
        + (3.0 * t2 - 2.0 * t) * h * d[i + 1])
        / h;
    (v, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_roots(r: f64) -> (f64, f64) {
        // r s² - s + r = 0
        let disc = (1.0 - 4.0 * r * r).sqrt();
        ((1.0 - disc) / (2.0 * r), (1.0 + disc) / (2.0 * r))
    }

    #[test]
    fn flux_examples() {
        let pm = Profile::perona_malik_exp(1.0).unwrap();
        let a = eval_flux(&pm, &[1.0, 0.0]);
        assert!((a[0] - (-0.5f64).exp()).abs() < 1e-15 && a[1] == 0.0);
        assert_eq!(eval_flux(&pm, &[0.0, 0.0]), vec![0.0, 0.0]);
        let pr = Profile::perona_malik_rational(1.0).unwrap();
        let a = eval_flux(&pr, &[0.0, 2.0]);
        assert!(a[0] == 0.0 && (a[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn branch_inverse_matches_quadratic() {
        let pr = Profile::perona_malik_rational(1.0).unwrap();
        for &r in &[0.05, 0.2, 0.3, 0.4, 0.49] {
            let (lo, hi) = quad_roots(r);
            assert!((pr.branch_inverse(r, Branch::Minus).unwrap() - lo).abs() < 1e-12);
            assert!((pr.branch_inverse(r, Branch::Plus).unwrap() - hi).abs() < 1e-11);
        }
        assert_eq!(pr.branch_inverse(0.5, Branch::Minus).unwrap(), 1.0);
        assert_eq!(pr.branch_inverse(0.5, Branch::Plus).unwrap(), 1.0);
        assert!(matches!(
            pr.branch_inverse(0.6, Branch::Minus),
            Err(ProfileError::OutOfRange { .. })
        ));
        assert!(pr.branch_inverse(0.0, Branch::Plus).is_err());
    }

    #[test]
    fn piecewise_branch_and_critical() {
        let h = Profile::piecewise_hoellig(1.0, 2.0, 1.0, 0.25, 1.0).unwrap();
        assert!((h.branch_inverse(0.75, Branch::Minus).unwrap() - 0.75).abs() < 1e-15);
        match h.critical_points().unwrap() {
            Critical::H {
                s1,
                s2,
                s1_star,
                s2_star,
            } => {
                assert_eq!((s1, s2), (1.0, 2.0));
                assert!((s1_star - 0.75).abs() < 1e-15);
                assert!((s2_star - 2.25).abs() < 1e-15);
                assert!((h.sigma(2.25) - 1.0).abs() < 1e-15);
            }
            _ => panic!("wrong regime"),
        }
        assert!(h.validate().passed());
    }

    #[test]
    fn pm_critical_points() {
        for p in [
            Profile::perona_malik_exp(1.0).unwrap(),
            Profile::perona_malik_rational(1.0).unwrap(),
        ] {
            match p.critical_points().unwrap() {
                Critical::Pm { s0 } => assert!((s0 - 1.0).abs() < 1e-10, "{s0}"),
                _ => panic!(),
            }
            assert!(p.validate().passed(), "{:?}", p.validate());
        }
    }

    #[test]
    fn uniqueness_threshold_examples() {
        let h = Profile::piecewise_hoellig(1.0, 2.0, 1.0, 0.25, 1.0).unwrap();
        let t = h.uniqueness_threshold().unwrap();
        assert!((t.m0_l - 0.375).abs() < 1e-12);
        assert!((t.s1_star - 0.75).abs() < 1e-12);
        assert!((t.c - 0.375).abs() < 1e-12);
        assert!((h.sigma(t.m0_l) - t.c * 1.0).abs() < 1e-12);

        let flat = Profile::piecewise_hoellig(1.0, 2.0, 1.0, 0.0, 1.0).unwrap();
        let t = flat.uniqueness_threshold().unwrap();
        assert!((t.m0_l - 0.5).abs() < 1e-15);

        let h2 = Profile::piecewise_hoellig(1.0, 2.0, 1.0, 0.25, 0.1).unwrap();
        let t = h2.uniqueness_threshold().unwrap();
        assert!((t.m0_l - 0.1).abs() < 1e-12 && (t.c - 0.1).abs() < 1e-12);
        assert!((h2.sigma(t.m0_l) - t.c).abs() < 1e-12);
    }

    #[test]
    fn smooth_hoellig_and_custom() {
        let h = Profile::hoellig_smooth(1.0, 2.0, 0.9).unwrap();
        assert_eq!(h.regime(), Regime::Hoellig);
        assert!(h.validate().passed(), "{:?}", h.validate());
        let s: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let pr = Profile::perona_malik_rational(1.0).unwrap();
        let sig: Vec<f64> = s.iter().map(|&x| pr.sigma(x)).collect();
        let c = Profile::custom(s, sig).unwrap();
        assert_eq!(c.regime(), Regime::PeronaMalik);
        match c.critical() {
            Critical::Pm { s0 } => assert!((s0 - 1.0).abs() < 1e-3),
            _ => panic!(),
        }
        assert!((c.f_zero() - 1.0).abs() < 1e-2, "{}", c.f_zero());
    }

    #[test]
    fn degenerate_valley_is_flagged() {
        let h = Profile::piecewise_hoellig(1.0, 2.0, 1.0, 1.0, 1.0).unwrap();
        let rep = h.validate();
        assert!(!rep.flags.is_empty());
    }
}
