//! Experiment configuration: presets, INI overlay, validation.
//!
//! The file format is INI with the sections `profile`, `window`, `grid`,
//! `datum`, `schedule` and `run`. Keys missing from the file keep the value
//! of the selected preset.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use fbp_core::pde::PdeError;
use fbp_core::profiles::{Linear, ProfileError};
use fbp_core::{modify_profile, Grid, ModCase, ModifiedProfile, Profile, Sigma};
use ini::Ini;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSpec {
    Linear,
    PmRational { s0: f64 },
    PmExp { s0: f64 },
    HoelligSmooth { a: f64, b: f64, kappa: f64 },
    Piecewise { s1: f64, s2: f64, k1: f64, k2: f64, k3: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatumSpec {
    /// `amplitude · cos(πx/lx)/π`, plus half that in `y` on 2D grids.
    Cosine { amplitude: f64 },
    /// One value per cell, last column of a CSV file.
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub profile: ProfileSpec,
    /// `(r1, r2)`; `None` runs the raw profile (forward profiles only).
    pub window: Option<(f64, f64)>,
    pub rbar: f64,
    pub rbar3: Option<f64>,
    pub case: Option<ModCase>,
    pub nx: usize,
    pub ny: Option<usize>,
    pub lx: f64,
    pub ly: f64,
    pub nt: usize,
    pub t_end: f64,
    pub datum: DatumSpec,
    pub eps0: f64,
    pub rho0: f64,
    pub stages: usize,
    pub snapshots: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let base = Self {
            profile: ProfileSpec::PmRational { s0: 1.0 },
            window: Some((0.3, 0.4)),
            rbar: 0.25,
            rbar3: None,
            case: Some(ModCase::CaseI),
            nx: 256,
            ny: None,
            lx: 1.0,
            ly: 1.0,
            nt: 256,
            t_end: 0.1,
            datum: DatumSpec::Cosine { amplitude: 1.5 },
            eps0: 0.2,
            rho0: 0.1,
            stages: 4,
            snapshots: 5,
            seed: 0,
        };
        Ok(match name {
            "case1" => base,
            "case2" => Self {
                profile: ProfileSpec::Piecewise { s1: 1.0, s2: 2.0, k1: 1.0, k2: 0.25, k3: 1.0 },
                window: Some((0.8, 0.95)),
                rbar: 0.78,
                rbar3: Some(0.98),
                case: Some(ModCase::CaseII),
                ..base
            },
            "heat" => Self {
                profile: ProfileSpec::Linear,
                window: None,
                case: None,
                nx: 128,
                nt: 200,
                t_end: 0.05,
                datum: DatumSpec::Cosine { amplitude: PI },
                ..base
            },
            "rect2d" => Self {
                nx: 64,
                ny: Some(64),
                nt: 200,
                t_end: 0.05,
                datum: DatumSpec::Cosine { amplitude: 1.0 },
                ..base
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset `{other}` (expected heat, case1, case2 or rect2d)"
                )))
            }
        })
    }

    /// Overlay the keys of an INI file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let ini = Ini::load_from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let get = |sec: &str, key: &str| ini.section(Some(sec)).and_then(|s| s.get(key));
        let num = |sec: &str, key: &str| -> Result<Option<f64>, CliError> {
            get(sec, key)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("[{sec}] {key} = `{v}` is not a number")))
                })
                .transpose()
        };
        let int = |sec: &str, key: &str| -> Result<Option<usize>, CliError> {
            get(sec, key)
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Config(format!("[{sec}] {key} = `{v}` is not a count")))
                })
                .transpose()
        };
        let need = |sec: &str, key: &str| -> Result<f64, CliError> {
            num(sec, key)?.ok_or_else(|| CliError::Config(format!("[{sec}] {key} is required")))
        };

        if let Some(kind) = get("profile", "kind") {
            self.profile = match kind.trim() {
                "linear" => ProfileSpec::Linear,
                "pm_rational" => ProfileSpec::PmRational { s0: need("profile", "s0")? },
                "pm_exp" => ProfileSpec::PmExp { s0: need("profile", "s0")? },
                "hoellig_smooth" => ProfileSpec::HoelligSmooth {
                    a: need("profile", "a")?,
                    b: need("profile", "b")?,
                    kappa: need("profile", "kappa")?,
                },
                "piecewise" => ProfileSpec::Piecewise {
                    s1: need("profile", "s1")?,
                    s2: need("profile", "s2")?,
                    k1: need("profile", "k1")?,
                    k2: need("profile", "k2")?,
                    k3: need("profile", "k3")?,
                },
                other => return Err(CliError::Config(format!("[profile] kind = `{other}` is unknown"))),
            };
        }
        match (num("window", "r1")?, num("window", "r2")?) {
            (Some(r1), Some(r2)) => self.window = Some((r1, r2)),
            (None, None) => {}
            _ => return Err(CliError::Config("[window] needs both r1 and r2".into())),
        }
        if get("window", "none").is_some_and(|v| v.trim() == "true") {
            self.window = None;
        }
        if let Some(v) = num("window", "rbar")? {
            self.rbar = v;
        }
        if let Some(v) = num("window", "rbar3")? {
            self.rbar3 = Some(v);
        }
        if let Some(v) = get("run", "case") {
            self.case = Some(parse_case(v)?);
        }
        if let Some(v) = int("run", "seed")? {
            self.seed = v as u64;
        }
        if let Some(v) = int("grid", "nx")? {
            self.nx = v;
        }
        if let Some(v) = int("grid", "ny")? {
            self.ny = (v > 0).then_some(v);
        }
        if let Some(v) = num("grid", "lx")? {
            self.lx = v;
        }
        if let Some(v) = num("grid", "ly")? {
            self.ly = v;
        }
        if let Some(v) = int("grid", "nt")? {
            self.nt = v;
        }
        if let Some(v) = num("grid", "t_end")? {
            self.t_end = v;
        }
        if let Some(v) = int("grid", "snapshots")? {
            self.snapshots = v;
        }
        if let Some(kind) = get("datum", "kind") {
            self.datum = match kind.trim() {
                "cosine" => DatumSpec::Cosine {
                    amplitude: num("datum", "amplitude")?.unwrap_or(1.0),
                },
                "csv" => DatumSpec::Csv(
                    get("datum", "path")
                        .map(|p| resolve(path, p.trim()))
                        .ok_or_else(|| CliError::Config("[datum] path is required for csv".into()))?,
                ),
                other => return Err(CliError::Config(format!("[datum] kind = `{other}` is unknown"))),
            };
        } else if let (DatumSpec::Cosine { amplitude }, Some(a)) = (&mut self.datum, num("datum", "amplitude")?) {
            *amplitude = a;
        }
        if let Some(v) = num("schedule", "eps0")? {
            self.eps0 = v;
        }
        if let Some(v) = num("schedule", "rho0")? {
            self.rho0 = v;
        }
        if let Some(v) = int("schedule", "stages")? {
            self.stages = v;
        }
        Ok(())
    }

    pub fn build_profile(&self) -> Result<Option<Profile>, CliError> {
        let cfg = |e: ProfileError| CliError::Config(format!("[profile] {e}"));
        Ok(Some(match self.profile {
            ProfileSpec::Linear => return Ok(None),
            ProfileSpec::PmRational { s0 } => Profile::perona_malik_rational(s0).map_err(cfg)?,
            ProfileSpec::PmExp { s0 } => Profile::perona_malik_exp(s0).map_err(cfg)?,
            ProfileSpec::HoelligSmooth { a, b, kappa } => Profile::hoellig_smooth(a, b, kappa).map_err(cfg)?,
            ProfileSpec::Piecewise { s1, s2, k1, k2, k3 } => {
                Profile::piecewise_hoellig(s1, s2, k1, k2, k3).map_err(cfg)?
            }
        }))
    }

    /// The modified profile for the configured window, with the failing
    /// clause named when the window is rejected.
    pub fn build_modified(&self, prof: &Profile) -> Result<ModifiedProfile, CliError> {
        let (r1, r2) = self
            .window
            .ok_or_else(|| CliError::Config("[window] r1, r2 are required for this profile".into()))?;
        let (lo, hi) = (prof.valley_value(), prof.peak_value());
        let clause = if !(r1 > lo) {
            Some(format!("valley < r1 ({lo} < {r1})"))
        } else if !(r1 < r2) {
            Some(format!("r1 < r2 ({r1} < {r2})"))
        } else if !(r2 < hi) {
            Some(format!("r2 < peak ({r2} < {hi})"))
        } else {
            None
        };
        if let Some(c) = clause {
            return Err(CliError::Config(format!("[window] clause `{c}` violated")));
        }
        let mp = modify_profile(prof, r1, r2).map_err(|e| CliError::Config(format!("[window] {e}")))?;
        if let Some(case) = self.case {
            if case != mp.case {
                return Err(CliError::Config(format!(
                    "[run] case {} requested but the profile gives case {}",
                    case_name(case),
                    case_name(mp.case)
                )));
            }
        }
        Ok(mp)
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        let g = match self.ny {
            None => Grid::new_1d(self.nx, 0.0, self.lx, self.nt, self.t_end),
            Some(ny) => Grid::new_2d([self.nx, ny], [0.0, 0.0], [self.lx, self.ly], self.nt, self.t_end),
        };
        g.map_err(|e| CliError::Config(format!("[grid] {e}")))
    }

    pub fn datum(&self, grid: &Grid) -> Result<Vec<f64>, CliError> {
        match &self.datum {
            DatumSpec::Cosine { amplitude } => {
                let (a, lx, ly) = (*amplitude, self.lx, self.ly);
                Ok(grid.sample(|x| {
                    let mut v = a * (PI * x[0] / lx).cos() / PI;
                    if let Some(y) = x.get(1) {
                        v += 0.5 * a * (PI * y / ly).cos() / PI;
                    }
                    v
                }))
            }
            DatumSpec::Csv(p) => {
                let vals = crate::io::read_column(p)?;
                if vals.len() != grid.cells() {
                    return Err(CliError::Config(format!(
                        "[datum] {} has {} values, grid has {} cells",
                        p.display(),
                        vals.len(),
                        grid.cells()
                    )));
                }
                Ok(vals)
            }
        }
    }
}

/// Flux used by `solve`: the modified profile when a window is set, the
/// raw profile otherwise.
pub enum Flux {
    Linear(Linear),
    Raw(Profile),
    Modified(ModifiedProfile),
}

impl Flux {
    pub fn sigma(&self) -> &dyn Sigma {
        match self {
            Flux::Linear(l) => l,
            Flux::Raw(p) => p,
            Flux::Modified(m) => m,
        }
    }
}

pub fn build_flux(cfg: &ExperimentConfig) -> Result<Flux, CliError> {
    match cfg.build_profile()? {
        None => Ok(Flux::Linear(Linear)),
        Some(p) if cfg.window.is_none() => Ok(Flux::Raw(p)),
        Some(p) => Ok(Flux::Modified(cfg.build_modified(&p)?)),
    }
}

pub fn parse_case(v: &str) -> Result<ModCase, CliError> {
    match v.trim() {
        "I" | "1" => Ok(ModCase::CaseI),
        "II" | "2" => Ok(ModCase::CaseII),
        other => Err(CliError::Config(format!("case `{other}` is not I or II"))),
    }
}

pub fn case_name(c: ModCase) -> &'static str {
    match c {
        ModCase::CaseI => "I",
        ModCase::CaseII => "II",
    }
}

impl From<PdeError> for CliError {
    fn from(e: PdeError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

fn resolve(config: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}
