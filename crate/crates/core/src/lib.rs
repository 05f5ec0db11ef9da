//! Numerical tools for forward-backward parabolic equations.

// `!(a < b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod profile_mod;
pub mod profiles;
pub mod grid;
pub mod pde;
pub mod div_inverse;
pub mod rankone;
pub mod convex_integration;
pub mod verification;
pub mod denoise;

pub use convex_integration::{run_pipeline, PipelineConfig, PipelineRun, StageReport, Thresholds};
pub use grid::{FaceField, FaceSeries, Grid, SpaceTimeField};
pub use profile_mod::{modify_profile, ModCase, ModifiedProfile};
pub use profiles::{Branch, Profile, Sigma};
pub use rankone::{RankOneWitness, SpaceTimeMatrix, WindowParams};
pub use verification::VerificationReport;
