//! Inversion-based editing.
//!
//! An image is inverted once with a fixed-point Euler solver and the per-step
//! unconditional directions are kept as a [`Trajectory`]. Edits then replay that
//! trajectory, blending in the newly conditioned direction inside the edit mask
//! with a factor that decays over the course of sampling.

mod store;

pub use store::{TrajectoryStore, STORE_VERSION};

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    cfg, ensure_finite, guided_eps, Denoiser, DiffusionError, SigmaSchedule, StepHook,
    DEFAULT_GUIDANCE,
};
use crate::grid::{BinaryMask, Grid, GridError, LabelMap};

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_FP_ITERS: usize = 4;
pub const INTERACTIVE_STEPS: usize = 42;
pub const TRANSFER_STEPS: usize = 250;
/// Smallest side of the patch re-diffused by a localized edit.
pub const MIN_EDIT_PATCH: usize = 442;

#[derive(Debug, thiserror::Error)]
pub enum EditError {
    #[error("trajectory has {trajectory} steps but the request asks for {request}")]
    StepMismatch { trajectory: usize, request: usize },
    #[error("{what} is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("no stored trajectory for image `{0}`; invert the image first")]
    NoTrajectory(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("trajectory store: {0}")]
    Store(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EditError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Inversion,
    Generation,
}

/// Per-step directions of one sampling pass, indexed like the schedule:
/// `eps_history[k]` moves the state from `sigma(k)` to `sigma(k + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub schedule: SigmaSchedule,
    pub eps_history: Vec<Grid>,
    /// State at `sigma(0)`.
    pub z_n: Grid,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn new(
        schedule: SigmaSchedule,
        eps_history: Vec<Grid>,
        z_n: Grid,
        provenance: Provenance,
    ) -> Result<Self> {
        if eps_history.len() != schedule.steps() {
            return Err(EditError::StepMismatch {
                trajectory: eps_history.len(),
                request: schedule.steps(),
            });
        }
        for e in &eps_history {
            z_n.ensure_same_shape(e)?;
        }
        Ok(Self {
            schedule,
            eps_history,
            z_n,
            provenance,
        })
    }

    pub fn steps(&self) -> usize {
        self.eps_history.len()
    }

    pub fn height(&self) -> usize {
        self.z_n.height()
    }

    pub fn width(&self) -> usize {
        self.z_n.width()
    }

    /// Spatial slice; sigmas are position independent so the schedule is shared.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Trajectory> {
        Ok(Trajectory {
            schedule: self.schedule.clone(),
            eps_history: self
                .eps_history
                .iter()
                .map(|e| e.crop(y0, x0, h, w))
                .collect::<Result<_, _>>()?,
            z_n: self.z_n.crop(y0, x0, h, w)?,
            provenance: self.provenance,
        })
    }

    /// Replays the stored directions from `z_n` down to sigma 0.
    pub fn reconstruct(&self) -> Result<Grid> {
        let mut z = self.z_n.clone();
        for (k, e) in self.eps_history.iter().enumerate() {
            z = z.add_scaled(e, self.schedule.sigma(k + 1) - self.schedule.sigma(k))?;
        }
        Ok(z)
    }
}

/// What happens outside the edit mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Background pixels follow the stored direction and reproduce the original.
    #[default]
    Replay,
    /// Mixing factor 0 outside the mask, i.e. the background takes the new
    /// conditioned direction.
    Literal,
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub condition: LabelMap,
    /// Pixels allowed to change.
    pub edit_mask: BinaryMask,
    pub alpha: f64,
    pub gamma: f64,
    /// Must match the trajectory when given.
    pub steps: Option<usize>,
    pub background: Background,
}

impl EditRequest {
    pub fn new(condition: LabelMap, edit_mask: BinaryMask) -> Self {
        Self {
            condition,
            edit_mask,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GUIDANCE,
            steps: None,
            background: Background::Replay,
        }
    }

    /// Edit everything the condition marks as a feature (label != 0).
    pub fn from_condition(condition: LabelMap) -> Self {
        let mask = BinaryMask::from_fn(condition.height(), condition.width(), |y, x| {
            condition.get(y, x) != 0
        });
        Self::new(condition, mask)
    }

    pub fn validate(&self) -> Result<()> {
        let c = (self.condition.height(), self.condition.width());
        let m = (self.edit_mask.height(), self.edit_mask.width());
        if c != m {
            return Err(EditError::ShapeMismatch {
                what: "edit mask",
                expected: c,
                got: m,
            });
        }
        if !(self.alpha > 0.0) {
            return Err(EditError::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(EditError::InvalidArgument(format!(
                "guidance must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<EditRequest> {
        Ok(EditRequest {
            condition: self.condition.crop(y0, x0, h, w)?,
            edit_mask: self.edit_mask.crop(y0, x0, h, w)?,
            ..self.clone()
        })
    }
}

/// `(i / n)^alpha`: 0 at `i = 0`, exactly 1 at `i = n`.
pub fn mix_factor(i: usize, n: usize, alpha: f64) -> f64 {
    if i >= n {
        1.0
    } else {
        (i as f64 / n as f64).powf(alpha)
    }
}

/// `eps_hat + (eps - eps_hat) (i / n)^alpha`, elementwise.
pub fn mix(eps_hat: &Grid, eps: &Grid, i: usize, n: usize, alpha: f64) -> Result<Grid> {
    if n == 0 || i > n {
        return Err(EditError::InvalidArgument(format!(
            "need 0 <= i <= n and n > 0, got i={i}, n={n}"
        )));
    }
    let f = mix_factor(i, n, alpha);
    if f == 1.0 {
        eps_hat.ensure_same_shape(eps)?;
        return Ok(eps.clone());
    }
    Ok(eps_hat.zip_map(eps, |h, e| h + (e - h) * f)?)
}

pub fn invert(
    denoiser: &dyn Denoiser,
    x0: &Grid,
    steps: usize,
    fp_iters: usize,
) -> Result<Trajectory> {
    invert_with_schedule(
        denoiser,
        x0,
        &SigmaSchedule::new(steps)?,
        fp_iters,
        &mut |_, _| true,
    )
}

/// Fixed-point Euler inversion. Walking the schedule backwards, each state is
/// the point whose forward Euler step lands on the current one. The estimate
/// starts from the previous step's direction (the current state itself on the
/// first step) and is refined `fp_iters` times. The direction
/// used in the final refinement is recorded, so replaying the history inverts
/// the inversion up to rounding.
pub fn invert_with_schedule(
    denoiser: &dyn Denoiser,
    x0: &Grid,
    schedule: &SigmaSchedule,
    fp_iters: usize,
    hook: StepHook<'_>,
) -> Result<Trajectory> {
    if fp_iters == 0 {
        return Err(EditError::InvalidArgument(
            "fp_iters must be at least 1".into(),
        ));
    }
    let n = schedule.steps();
    ensure_finite(x0, 0)?;
    let mut history = vec![None; n];
    let mut z = x0.clone();
    let mut prev: Option<Grid> = None;
    for (done, k) in (0..n).rev().enumerate() {
        let h = schedule.sigma(k + 1) - schedule.sigma(k);
        let sigma = schedule.sigma(k);
        let mut est = match &prev {
            Some(e) => z.add_scaled(e, -h)?,
            None => z.clone(),
        };
        let mut eps = None;
        for _ in 0..fp_iters {
            let e = denoiser.eval(&est, None, sigma)?;
            est = z.add_scaled(&e, -h)?;
            eps = Some(e);
        }
        ensure_finite(&est, done + 1)?;
        prev = eps.clone();
        history[k] = eps;
        z = est;
        if !hook(done + 1, n) {
            return Err(DiffusionError::Cancelled.into());
        }
    }
    Trajectory::new(
        schedule.clone(),
        history
            .into_iter()
            .map(|e| e.expect("every step visited"))
            .collect(),
        z,
        Provenance::Inversion,
    )
}

/// Euler sampling that also records the direction taken at every step, so the
/// result can be edited without inversion.
pub fn generate_with_trajectory(
    denoiser: &dyn Denoiser,
    z_n: &Grid,
    cond: Option<&LabelMap>,
    schedule: &SigmaSchedule,
    gamma: f64,
    hook: StepHook<'_>,
) -> Result<(Grid, Trajectory)> {
    let cond = crate::diffusion::fit_condition(z_n, cond)?;
    let n = schedule.steps();
    let mut z = z_n.clone();
    let mut history = Vec::with_capacity(n);
    for k in 0..n {
        let e = guided_eps(denoiser, &z, cond.as_ref(), schedule.sigma(k), gamma)?;
        z = z.add_scaled(&e, schedule.sigma(k + 1) - schedule.sigma(k))?;
        ensure_finite(&z, k + 1)?;
        history.push(e);
        if !hook(k + 1, n) {
            return Err(DiffusionError::Cancelled.into());
        }
    }
    let traj = Trajectory::new(
        schedule.clone(),
        history,
        z_n.clone(),
        Provenance::Generation,
    )?;
    Ok((z, traj))
}

pub fn regenerate_with_edit(
    denoiser: &dyn Denoiser,
    traj: &Trajectory,
    req: &EditRequest,
) -> Result<Grid> {
    regenerate_observed(denoiser, traj, req, &mut |_, _| true)
}

/// Replays `traj` from `z_n`. Inside the edit mask the direction is the stored
/// one mixed with the guided conditional estimate; outside it is set by
/// `req.background`. With an empty mask and replayed background no denoiser
/// call is made.
pub fn regenerate_observed(
    denoiser: &dyn Denoiser,
    traj: &Trajectory,
    req: &EditRequest,
    hook: StepHook<'_>,
) -> Result<Grid> {
    req.validate()?;
    let n = traj.steps();
    if let Some(s) = req.steps.filter(|&s| s != n) {
        return Err(EditError::StepMismatch {
            trajectory: n,
            request: s,
        });
    }
    let shape = (traj.height(), traj.width());
    let got = (req.condition.height(), req.condition.width());
    if got != shape {
        return Err(EditError::ShapeMismatch {
            what: "condition",
            expected: shape,
            got,
        });
    }
    let active = !req.edit_mask.is_empty() || req.background == Background::Literal;
    let channels = traj.z_n.channels();
    let mut z = traj.z_n.clone();
    for k in 0..n {
        let stored = &traj.eps_history[k];
        let h = traj.schedule.sigma(k + 1) - traj.schedule.sigma(k);
        z = if active {
            let mut dir = cfg(
                denoiser,
                &z,
                &req.condition,
                traj.schedule.sigma(k),
                req.gamma,
            )?;
            let f = mix_factor(n - k, n, req.alpha);
            let bits = req.edit_mask.bits();
            for (p, (d, s)) in dir
                .data_mut()
                .chunks_exact_mut(channels)
                .zip(stored.data().chunks_exact(channels))
                .enumerate()
            {
                let inside = bits[p];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv = match (inside, req.background) {
                        (true, _) if f == 1.0 => sv,
                        (true, _) => *dv + (sv - *dv) * f,
                        (false, Background::Replay) => sv,
                        (false, Background::Literal) => *dv,
                    };
                }
            }
            z.add_scaled(&dir, h)?
        } else {
            z.add_scaled(stored, h)?
        };
        ensure_finite(&z, k + 1)?;
        if !hook(k + 1, n) {
            return Err(DiffusionError::Cancelled.into());
        }
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// The patch re-diffused for an edit of `mask`: at least `min_side` on each axis
/// (clamped to the image), centred on the mask's bounding box.
pub fn edit_patch(mask: &BinaryMask, min_side: usize) -> Option<PatchRect> {
    let (y0, x0, y1, x1) = mask.bounding_box()?;
    let axis = |lo: usize, hi: usize, len: usize| {
        let side = (hi - lo + 1).max(min_side).min(len);
        let centre = (lo + hi).div_ceil(2);
        let start = centre.saturating_sub(side / 2).min(len - side).min(lo);
        (start, side)
    };
    let (y, height) = axis(y0, y1, mask.height());
    let (x, width) = axis(x0, x1, mask.width());
    Some(PatchRect {
        y,
        x,
        height,
        width,
    })
}

#[derive(Clone, Debug)]
pub struct LocalizedEdit {
    pub image: Grid,
    /// `None` when the mask was empty and nothing ran.
    pub patch: Option<PatchRect>,
}

/// Re-diffuses only the patch around the brushed mask using the matching slice
/// of the stored trajectory, then writes the edited pixels back into `image`.
/// With replayed background only masked pixels are written; with the literal
/// background the whole patch is.
pub fn localized_edit(
    denoiser: &dyn Denoiser,
    image: &Grid,
    traj: &Trajectory,
    req: &EditRequest,
) -> Result<LocalizedEdit> {
    localized_edit_observed(denoiser, image, traj, req, &mut |_, _| true)
}

pub fn localized_edit_observed(
    denoiser: &dyn Denoiser,
    image: &Grid,
    traj: &Trajectory,
    req: &EditRequest,
    hook: StepHook<'_>,
) -> Result<LocalizedEdit> {
    req.validate()?;
    image.ensure_same_shape(&traj.z_n)?;
    let Some(patch) = edit_patch(&req.edit_mask, MIN_EDIT_PATCH) else {
        return Ok(LocalizedEdit {
            image: image.clone(),
            patch: None,
        });
    };
    let PatchRect {
        y,
        x,
        height,
        width,
    } = patch;
    let sub_traj = traj.crop(y, x, height, width)?;
    let sub_req = req.crop(y, x, height, width)?;
    let edited = regenerate_observed(denoiser, &sub_traj, &sub_req, hook)?;
    let mut out = image.clone();
    for py in 0..height {
        for px in 0..width {
            if req.background == Background::Literal || sub_req.edit_mask.get(py, px) {
                out.pixel_mut(y + py, x + px)
                    .copy_from_slice(edited.pixel(py, px));
            }
        }
    }
    Ok(LocalizedEdit {
        image: out,
        patch: Some(patch),
    })
}

/// Inverts an out-of-distribution image and regenerates it under `req`;
/// returns the edited image and the inversion trajectory.
pub fn transfer_feature(
    denoiser: &dyn Denoiser,
    target: &Grid,
    req: &EditRequest,
    steps: usize,
) -> Result<(Grid, Trajectory)> {
    transfer_feature_with(
        denoiser,
        target,
        req,
        &SigmaSchedule::new(steps)?,
        DEFAULT_FP_ITERS,
        &mut |_, _| true,
    )
}

/// [`transfer_feature`] with an explicit schedule. `hook` sees the inversion
/// steps followed by the regeneration steps.
pub fn transfer_feature_with(
    denoiser: &dyn Denoiser,
    target: &Grid,
    req: &EditRequest,
    schedule: &SigmaSchedule,
    fp_iters: usize,
    hook: StepHook<'_>,
) -> Result<(Grid, Trajectory)> {
    let n = schedule.steps();
    let traj = invert_with_schedule(denoiser, target, schedule, fp_iters, &mut |done, _| {
        hook(done, 2 * n)
    })?;
    let mut req = req.clone();
    req.steps = None;
    let out = regenerate_observed(denoiser, &traj, &req, &mut |done, _| hook(n + done, 2 * n))?;
    Ok((out, traj))
}
