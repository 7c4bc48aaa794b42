use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ensure_finite, guided_eps, Denoiser, DiffusionError, SigmaSchedule, Solver,
};
use crate::grid::{Grid, LabelMap};

use super::{InfiniteError, Result, WindowPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiDiffusionConfig {
    pub solver: Solver,
    /// Windows evaluated at once; bounds the per-window working set.
    pub concurrency: usize,
}

impl Default for MultiDiffusionConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Euler,
            concurrency: rayon::current_num_threads().max(1),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub steps: usize,
    pub window_evaluations: usize,
    pub windows_per_step: Vec<usize>,
    /// Largest window handed to the denoiser, in pixels.
    pub max_window_pixels: usize,
    /// Bytes held in full-field accumulation buffers.
    pub field_buffer_bytes: usize,
    /// Bytes of window crops and estimates alive at once, excluding denoiser internals.
    pub window_working_bytes: usize,
}

/// Called with `(windows evaluated, total windows)`; returning `false` cancels.
pub type WindowHook<'a> = &'a mut (dyn FnMut(usize, usize) -> bool + Send);

struct Accumulator {
    sum: Vec<f64>,
    count: Vec<u32>,
}

struct Ctx<'a> {
    denoiser: &'a dyn Denoiser,
    cond: Option<&'a LabelMap>,
    plan: &'a WindowPlan,
    gamma: f64,
    concurrency: usize,
    stats: SampleStats,
    done: usize,
    total: usize,
}

impl Ctx<'_> {
    /// Averages windowed estimates at `sigma` into `acc`, then returns the
    /// averaged direction at flat index `i` via `acc.sum[i]`.
    fn average(
        &mut self,
        z: &Grid,
        step: usize,
        sigma: f64,
        acc: &mut Accumulator,
        hook: &mut WindowHook<'_>,
    ) -> Result<()> {
        let plan = self.plan;
        let (h, w, c) = z.shape();
        let (wh, ww) = (plan.window_h, plan.window_w);
        acc.sum.iter_mut().for_each(|v| *v = 0.0);
        acc.count.iter_mut().for_each(|v| *v = 0);
        let windows = &plan.steps[step];
        let mut origins = windows.origins();
        let mut chunk = Vec::with_capacity(self.concurrency);
        loop {
            chunk.clear();
            chunk.extend(origins.by_ref().take(self.concurrency));
            if chunk.is_empty() {
                break;
            }
            let estimates: Vec<crate::diffusion::Result<Grid>> = chunk
                .par_iter()
                .map(|&(y0, x0)| {
                    let patch = z.crop_wrapped(y0, x0, wh, ww);
                    let cond = self.cond.map(|l| l.crop_wrapped(y0, x0, wh, ww));
                    guided_eps(self.denoiser, &patch, cond.as_ref(), sigma, self.gamma)
                })
                .collect();
            let per_window = wh * ww * (2 * c * 8 + usize::from(self.cond.is_some()));
            self.stats.window_working_bytes = self
                .stats
                .window_working_bytes
                .max(per_window * chunk.len());
            // Serial, row-major accumulation keeps the result independent of evaluation order.
            for (&(y0, x0), est) in chunk.iter().zip(estimates) {
                let est = est?;
                if est.shape() != (wh, ww, c) {
                    return Err(InfiniteError::Diffusion(DiffusionError::InvalidArgument(
                        format!(
                            "denoiser returned {:?} for a {:?} window",
                            est.shape(),
                            (wh, ww, c)
                        ),
                    )));
                }
                for dy in 0..wh {
                    let y = (y0 + dy) % h;
                    for dx in 0..ww {
                        let p = y * w + (x0 + dx) % w;
                        acc.count[p] += 1;
                        for (s, v) in acc.sum[p * c..(p + 1) * c]
                            .iter_mut()
                            .zip(est.pixel(dy, dx))
                        {
                            *s += v;
                        }
                    }
                }
            }
            self.done += chunk.len();
            self.stats.window_evaluations += chunk.len();
            self.stats.max_window_pixels = self.stats.max_window_pixels.max(wh * ww);
            if !hook(self.done, self.total) {
                return Err(DiffusionError::Cancelled.into());
            }
        }
        for (p, &n) in acc.count.iter().enumerate() {
            if n == 0 {
                return Err(InfiniteError::PlanMismatch(format!(
                    "step {step}: pixel ({}, {}) not covered",
                    p / w,
                    p % w
                )));
            }
            for s in &mut acc.sum[p * c..(p + 1) * c] {
                *s /= n as f64;
            }
        }
        Ok(())
    }
}

/// Samples a field of any size by denoising overlapping windows and averaging
/// their estimates each step.
pub fn multidiffusion_sample(
    denoiser: &dyn Denoiser,
    z: &Grid,
    cond: Option<&LabelMap>,
    schedule: &SigmaSchedule,
    plan: &WindowPlan,
    gamma: f64,
    cfg: MultiDiffusionConfig,
) -> Result<(Grid, SampleStats)> {
    multidiffusion_observed(
        denoiser,
        z,
        cond,
        schedule,
        plan,
        gamma,
        cfg,
        &mut |_, _| true,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn multidiffusion_observed(
    denoiser: &dyn Denoiser,
    z: &Grid,
    cond: Option<&LabelMap>,
    schedule: &SigmaSchedule,
    plan: &WindowPlan,
    gamma: f64,
    cfg: MultiDiffusionConfig,
    mut hook: WindowHook<'_>,
) -> Result<(Grid, SampleStats)> {
    let (h, w, c) = z.shape();
    if (plan.height, plan.width) != (h, w) {
        return Err(InfiniteError::PlanMismatch(format!(
            "plan is {}x{} but the field is {h}x{w}",
            plan.height, plan.width
        )));
    }
    let n = schedule.steps();
    if plan.steps.len() < n {
        return Err(InfiniteError::PlanMismatch(format!(
            "plan has {} steps, schedule {n}",
            plan.steps.len()
        )));
    }
    if let Some(l) = cond {
        if (l.height(), l.width()) != (h, w) {
            return Err(InfiniteError::PlanMismatch(format!(
                "condition is {}x{} but the field is {h}x{w}",
                l.height(),
                l.width()
            )));
        }
    }
    ensure_finite(z, 0)?;
    let heun = cfg.solver == Solver::Heun;
    let total = (0..n)
        .map(|k| {
            plan.steps[k].len()
                * if heun && schedule.sigma(k + 1) > 0.0 {
                    2
                } else {
                    1
                }
        })
        .sum();
    let mut ctx = Ctx {
        denoiser,
        cond,
        plan,
        gamma,
        concurrency: cfg.concurrency.max(1),
        stats: SampleStats {
            steps: n,
            ..Default::default()
        },
        done: 0,
        total,
    };
    let len = h * w * c;
    let mut acc = Accumulator {
        sum: vec![0.0; len],
        count: vec![0; h * w],
    };
    let mut first = if heun { vec![0.0; len] } else { Vec::new() };
    let mut state = z.clone();
    let mut trial = if heun {
        Grid::zeros(h, w, c)
    } else {
        Grid::zeros(0, 0, c)
    };
    ctx.stats.field_buffer_bytes =
        (acc.sum.len() + first.len() + trial.len()) * 8 + acc.count.len() * 4;
    for k in 0..n {
        let (s, s_next) = (schedule.sigma(k), schedule.sigma(k + 1));
        let dt = s_next - s;
        ctx.average(&state, k, s, &mut acc, &mut hook)?;
        ctx.stats.windows_per_step.push(plan.steps[k].len());
        if heun && s_next > 0.0 {
            first.copy_from_slice(&acc.sum);
            for ((t, &z0), &d) in trial.data_mut().iter_mut().zip(state.data()).zip(&first) {
                *t = z0 + dt * d;
            }
            ctx.average(&trial, k, s_next, &mut acc, &mut hook)?;
            for ((v, &d1), &d2) in state.data_mut().iter_mut().zip(&first).zip(&acc.sum) {
                *v += dt * (0.5 * (d1 + d2));
            }
        } else {
            for (v, &d) in state.data_mut().iter_mut().zip(&acc.sum) {
                *v += dt * d;
            }
        }
        ensure_finite(&state, k + 1)?;
    }
    Ok((state, ctx.stats))
}
