use serde::{Deserialize, Serialize};

use crate::grid::{Grid, LabelMap};

use super::{guided_eps, Denoiser, DiffusionError, Result, SigmaSchedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    #[default]
    Heun,
}

/// Called after every completed step with `(step, total)`; returning `false` cancels.
pub type StepHook<'a> = &'a mut (dyn FnMut(usize, usize) -> bool + Send);

/// The condition resized (nearest) to `z`'s spatial size.
pub fn fit_condition(z: &Grid, cond: Option<&LabelMap>) -> Result<Option<LabelMap>> {
    match cond {
        None => Ok(None),
        Some(c) if (c.height(), c.width()) == (z.height(), z.width()) => Ok(Some(c.clone())),
        Some(c) => Ok(Some(c.resize_nearest(z.height(), z.width())?)),
    }
}

pub fn ensure_finite(z: &Grid, step: usize) -> Result<()> {
    if z.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffusionError::NonFinite { step })
    }
}

/// Integrates the probability-flow ODE from `schedule.sigma(0)` to 0.
pub fn sample(
    denoiser: &dyn Denoiser,
    z_start: &Grid,
    cond: Option<&LabelMap>,
    schedule: &SigmaSchedule,
    solver: Solver,
    gamma: f64,
) -> Result<Grid> {
    sample_observed(
        denoiser,
        z_start,
        cond,
        schedule,
        solver,
        gamma,
        &mut |_, _| true,
    )
}

pub fn sample_observed(
    denoiser: &dyn Denoiser,
    z_start: &Grid,
    cond: Option<&LabelMap>,
    schedule: &SigmaSchedule,
    solver: Solver,
    gamma: f64,
    hook: StepHook<'_>,
) -> Result<Grid> {
    let cond = fit_condition(z_start, cond)?;
    let cond = cond.as_ref();
    let n = schedule.steps();
    let mut z = z_start.clone();
    ensure_finite(&z, 0)?;
    for i in 0..n {
        let (s, s_next) = (schedule.sigma(i), schedule.sigma(i + 1));
        let h = s_next - s;
        let d = guided_eps(denoiser, &z, cond, s, gamma)?;
        let euler = z.add_scaled(&d, h)?;
        z = if solver == Solver::Heun && s_next > 0.0 {
            let d2 = guided_eps(denoiser, &euler, cond, s_next, gamma)?;
            let avg = d.zip_map(&d2, |a, b| 0.5 * (a + b))?;
            z.add_scaled(&avg, h)?
        } else {
            euler
        };
        ensure_finite(&z, i + 1)?;
        if !hook(i + 1, n) {
            return Err(DiffusionError::Cancelled);
        }
    }
    Ok(z)
}

pub fn sample_euler(
    denoiser: &dyn Denoiser,
    z: &Grid,
    cond: Option<&LabelMap>,
    schedule: &SigmaSchedule,
    gamma: f64,
) -> Result<Grid> {
    sample(denoiser, z, cond, schedule, Solver::Euler, gamma)
}

pub fn sample_heun(
    denoiser: &dyn Denoiser,
    z: &Grid,
    cond: Option<&LabelMap>,
    schedule: &SigmaSchedule,
    gamma: f64,
) -> Result<Grid> {
    sample(denoiser, z, cond, schedule, Solver::Heun, gamma)
}
