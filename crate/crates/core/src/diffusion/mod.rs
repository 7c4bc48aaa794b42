//! Probability-flow ODE machinery.
//!
//! The engine standardizes on the direction `eps = dz/dsigma = (z - D(z; sigma)) / sigma`
//! where `D` is the clean-image estimate, so an Euler step is
//! `z_next = z + (sigma_next - sigma) * eps`. Any preconditioning belongs inside
//! the denoiser.

mod bridge;
mod denoisers;
mod sampler;
mod schedule;

pub use bridge::{
    decode_request, encode_request, read_frame, serve_bridge, serve_tcp, write_frame,
    BridgeDenoiser, BridgeError, ChildStream, Transport, BRIDGE_MAGIC, MSG_ERROR, MSG_REQUEST,
    MSG_RESPONSE,
};
pub use denoisers::{
    Counting, Echo, ExemplarConfig, ExemplarPatch, GaussianAnalytic, GaussianMixture,
    DEFAULT_EXEMPLAR_BANDWIDTH, DEFAULT_EXEMPLAR_PATCH, DEFAULT_PATCHES_PER_LABEL,
};
pub use sampler::{
    ensure_finite, fit_condition, sample, sample_euler, sample_heun, sample_observed, Solver,
    StepHook,
};
pub use schedule::{
    ScheduleConfig, SigmaSchedule, DEFAULT_RHO, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN,
};

use crate::grid::{Grid, GridError, LabelMap};

pub const DEFAULT_GUIDANCE: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("non-finite state after step {step}")]
    NonFinite { step: usize },
    #[error("label {0} has no exemplar support")]
    LabelUnsupported(u8),
    #[error("condition is {cond:?} but the state is {state:?}")]
    ConditionShape {
        cond: (usize, usize),
        state: (usize, usize),
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sampling cancelled")]
    Cancelled,
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;

/// A direction estimator `eps(z, c; sigma)`.
///
/// Implementations must return a grid shaped like `z`, be deterministic in their
/// inputs, and tolerate concurrent calls.
pub trait Denoiser: Send + Sync {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        (**self).eval(z, cond, sigma)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        (**self).eval(z, cond, sigma)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        (**self).eval(z, cond, sigma)
    }
}

pub(crate) fn check_cond(z: &Grid, cond: Option<&LabelMap>) -> Result<()> {
    if let Some(c) = cond {
        if (c.height(), c.width()) != (z.height(), z.width()) {
            return Err(DiffusionError::ConditionShape {
                cond: (c.height(), c.width()),
                state: (z.height(), z.width()),
            });
        }
    }
    Ok(())
}

/// Classifier-free guidance: `eps(z, None) + gamma (eps(z, c) - eps(z, None))`,
/// always from exactly two evaluations. `gamma` 0 and 1 return the respective
/// evaluation unchanged.
pub fn cfg(
    denoiser: &dyn Denoiser,
    z: &Grid,
    cond: &LabelMap,
    sigma: f64,
    gamma: f64,
) -> Result<Grid> {
    if !(gamma >= 0.0) {
        return Err(DiffusionError::InvalidArgument(format!(
            "guidance must be >= 0, got {gamma}"
        )));
    }
    let uncond = denoiser.eval(z, None, sigma)?;
    let cond_eps = denoiser.eval(z, Some(cond), sigma)?;
    if gamma == 1.0 {
        return Ok(cond_eps);
    }
    if gamma == 0.0 {
        return Ok(uncond);
    }
    Ok(uncond.zip_map(&cond_eps, |u, c| u + gamma * (c - u))?)
}

/// Guided direction when a condition is present, plain unconditional otherwise.
pub fn guided_eps(
    denoiser: &dyn Denoiser,
    z: &Grid,
    cond: Option<&LabelMap>,
    sigma: f64,
    gamma: f64,
) -> Result<Grid> {
    match cond {
        Some(c) => cfg(denoiser, z, c, sigma, gamma),
        None => denoiser.eval(z, None, sigma),
    }
}
