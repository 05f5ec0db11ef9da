//! Oscillatory perturbations along rank-one directions and the staged
//! surgery that drives `(Du, v_t)` towards the flux constraint.

mod oscillation;
mod pipeline;

pub use oscillation::*;
pub use pipeline::*;
