//! Feature-aware texture synthesis.
//!
//! The pipeline finds prominent, non-stationary features in a set of texture
//! photographs, groups them into feature types, and synthesizes or edits
//! textures conditioned on per-pixel label maps:
//!
//! * [`threshold`]: anomaly scores to binary masks with an adaptive threshold.
//! * [`cluster`]: masks to feature-type labels via contrastive region embeddings.
//! * [`diffusion`]: sigma schedules, denoisers, guidance and ODE samplers.
//! * [`edit`]: inversion, trajectory replay with noise mixing, localized edits.
//! * [`infinite`]: uniformized noise and windowed sampling for large or tileable output.
//! * [`pipeline`]: the detect and segment stages end to end.
//!
//! ```
//! use texsynth::diffusion::{sample_heun, GaussianAnalytic, SigmaSchedule};
//! use texsynth::{Grid, Rng};
//!
//! let denoiser = GaussianAnalytic::new(vec![0.5], 0.1);
//! let schedule = SigmaSchedule::new(18)?;
//! let noise = Grid::standard_normal(8, 8, 1, &mut Rng::new(7)).map(|v| v * schedule.sigma(0));
//! let out = sample_heun(&denoiser, &noise, None, &schedule, 1.0)?;
//! assert!((out.channel_means()[0] - 0.5).abs() < 0.2);
//! # Ok::<(), texsynth::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod diffusion;
pub mod edit;
pub mod features;
pub mod fixture;
pub mod grid;
pub mod infinite;
pub mod pipeline;
pub mod rng;
pub mod threshold;

pub use grid::{BinaryMask, Grid, GridError, LabelMap};
pub use rng::Rng;

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Threshold(#[from] threshold::ThresholdError),
    #[error(transparent)]
    Cluster(#[from] cluster::ClusterError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error(transparent)]
    Edit(#[from] edit::EditError),
    #[error(transparent)]
    Infinite(#[from] infinite::InfiniteError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(doctest)]
mod readme {
    #[doc = include_str!("../../../README.md")]
    struct Readme;
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    struct Overview;
    #[doc = include_str!("../../../book/src/grids.md")]
    struct Grids;
    #[doc = include_str!("../../../book/src/threshold.md")]
    struct Threshold;
    #[doc = include_str!("../../../book/src/clustering.md")]
    struct Clustering;
    #[doc = include_str!("../../../book/src/diffusion.md")]
    struct Diffusion;
    #[doc = include_str!("../../../book/src/editing.md")]
    struct Editing;
    #[doc = include_str!("../../../book/src/infinite.md")]
    struct Infinite;
}
