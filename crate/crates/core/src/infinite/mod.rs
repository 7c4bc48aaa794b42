//! Fields larger than the denoiser's window: noise uniformization, shifted
//! overlapping windows with averaged estimates, and wrap-around tiling.

mod multidiffusion;
mod seam;
mod uniform;
mod windows;

pub use multidiffusion::{
    multidiffusion_observed, multidiffusion_sample, MultiDiffusionConfig, SampleStats, WindowHook,
};
pub use seam::{ks_two_sample, seam_differences, seam_report, KsResult, SeamReport};
pub use uniform::{
    uniform_noise_field, uniform_noise_with_prototype, uniformize, uniformize_with,
    UniformizeConfig, Uniformized, DEFAULT_COARSE, DEFAULT_CUTOFF,
};
pub use windows::{
    plan_windows, PlanConfig, StepWindows, WindowPlan, DEFAULT_OVERLAP_MIN, DEFAULT_WINDOW,
};

use crate::diffusion::{Denoiser, DiffusionError, ScheduleConfig};
use crate::grid::{Grid, GridError, LabelMap};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum InfiniteError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("plan does not fit the field: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = InfiniteError> = std::result::Result<T, E>;

/// Everything a large synthesis needs besides the denoiser and the condition.
#[derive(Clone, Debug)]
pub struct SynthesisConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub steps: usize,
    pub schedule: ScheduleConfig,
    pub gamma: f64,
    pub plan: PlanConfig,
    pub uniformize: UniformizeConfig,
    pub sampler: MultiDiffusionConfig,
    pub seed: u64,
}

impl SynthesisConfig {
    pub fn new(height: usize, width: usize, channels: usize, steps: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            channels,
            steps,
            schedule: ScheduleConfig::default(),
            gamma: crate::diffusion::DEFAULT_GUIDANCE,
            plan: PlanConfig::default(),
            uniformize: UniformizeConfig::default(),
            sampler: MultiDiffusionConfig::default(),
            seed,
        }
    }
}

/// Uniformized noise plus a window plan, then windowed sampling. The noise,
/// the plan and the shuffles use separate streams of `cfg.seed`. A `prototype`
/// overrides the field's own first tile.
pub fn synthesize(
    denoiser: &dyn Denoiser,
    cond: Option<&LabelMap>,
    cfg: &SynthesisConfig,
    prototype: Option<&Grid>,
    hook: WindowHook<'_>,
) -> Result<(Grid, SampleStats)> {
    let base = Rng::new(cfg.seed);
    let mut noise_rng = base.fork(1);
    let mut plan_rng = base.fork(2);
    let schedule = cfg.schedule.build(cfg.steps)?;
    let tile = cfg.plan.window;
    let unif = if cfg.height.min(cfg.width) < cfg.uniformize.coarse {
        // Too small to uniformize: plain white noise.
        Grid::standard_normal(cfg.height, cfg.width, cfg.channels, &mut noise_rng)
    } else {
        match prototype {
            Some(p) => {
                uniform_noise_with_prototype(
                    cfg.height,
                    cfg.width,
                    p,
                    cfg.uniformize,
                    &mut noise_rng,
                )?
                .field
            }
            None => {
                uniform_noise_field(
                    cfg.height,
                    cfg.width,
                    cfg.channels,
                    tile,
                    cfg.uniformize,
                    &mut noise_rng,
                )?
                .field
            }
        }
    };
    let z = unif.map(|v| v * schedule.sigma(0));
    let plan = plan_windows(cfg.height, cfg.width, cfg.plan, cfg.steps, &mut plan_rng)?;
    let cond = match cond {
        Some(c) if (c.height(), c.width()) != (cfg.height, cfg.width) => {
            Some(c.resize_nearest(cfg.height, cfg.width)?)
        }
        other => other.cloned(),
    };
    multidiffusion_observed(
        denoiser,
        &z,
        cond.as_ref(),
        &schedule,
        &plan,
        cfg.gamma,
        cfg.sampler,
        hook,
    )
}

/// [`synthesize`] with wrapping windows, so the output tiles seamlessly.
pub fn tileable_synthesize(
    denoiser: &dyn Denoiser,
    cond: Option<&LabelMap>,
    cfg: &SynthesisConfig,
    prototype: Option<&Grid>,
) -> Result<Grid> {
    let mut cfg = cfg.clone();
    cfg.plan.wrap = true;
    cfg.uniformize.boundary = crate::grid::Boundary::Circular;
    Ok(synthesize(denoiser, cond, &cfg, prototype, &mut |_, _| true)?.0)
}
