use serde::{Deserialize, Serialize};

use crate::rng::Rng;

use super::{InfiniteError, Result};

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_OVERLAP_MIN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub window: usize,
    pub overlap_min: usize,
    pub wrap: bool,
    /// Random per-step shift of the lattice: in `[0, overlap_min / 2)` for
    /// bounded fields, over the whole stride when wrapping.
    pub jitter: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            overlap_min: DEFAULT_OVERLAP_MIN,
            wrap: false,
            jitter: true,
        }
    }
}

impl PlanConfig {
    pub fn wrapping(mut self) -> Self {
        self.wrap = true;
        self
    }
}

/// Window origins of one denoising step: every `(y, x)` in `ys x xs`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepWindows {
    pub ys: Vec<usize>,
    pub xs: Vec<usize>,
}

impl StepWindows {
    pub fn len(&self) -> usize {
        self.ys.len() * self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Origins in row-major order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ys
            .iter()
            .flat_map(move |&y| self.xs.iter().map(move |&x| (y, x)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub height: usize,
    pub width: usize,
    /// Window extent; smaller than the configured window only on a wrapped
    /// axis shorter than it.
    pub window_h: usize,
    pub window_w: usize,
    pub overlap_min: usize,
    pub overlap_max: usize,
    pub wrap: bool,
    pub steps: Vec<StepWindows>,
}

fn axis_origins(len: usize, window: usize, stride: usize, wrap: bool, shift: usize) -> Vec<usize> {
    if len <= window {
        return vec![if wrap { shift % len } else { 0 }];
    }
    if wrap {
        let n = len.div_ceil(stride);
        return (0..n).map(|j| (shift + j * stride) % len).collect();
    }
    let mut out = Vec::new();
    let last = len - window;
    let mut o = -(shift as isize);
    loop {
        let clamped = o.clamp(0, last as isize) as usize;
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if o + window as isize >= len as isize {
            break;
        }
        o += stride as isize;
    }
    out
}

/// Per step, a lattice of windows with stride `window - overlap_min`, shifted
/// by a random offset when jitter is on. Without wrap the outermost windows are
/// clamped inside the field; with wrap the lattice is periodic.
pub fn plan_windows(
    height: usize,
    width: usize,
    cfg: PlanConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<WindowPlan> {
    if cfg.window == 0 || cfg.overlap_min >= cfg.window {
        return Err(InfiniteError::InvalidArgument(format!(
            "overlap_min {} must be below the window {}",
            cfg.overlap_min, cfg.window
        )));
    }
    if height == 0 || width == 0 {
        return Err(InfiniteError::InvalidArgument(
            "field must be at least 1x1".into(),
        ));
    }
    if !cfg.wrap && (height < cfg.window || width < cfg.window) {
        return Err(InfiniteError::InvalidArgument(format!(
            "{height}x{width} field is smaller than the {0}x{0} window; enable wrap",
            cfg.window
        )));
    }
    let stride = cfg.window - cfg.overlap_min;
    let max_shift = (cfg.overlap_min / 2).min(stride).max(1);
    // A wrapped lattice has no clamped edge windows, so any shift is valid and
    // a full-stride shift leaves no column systematically on a window border.
    let range = if cfg.wrap { stride } else { max_shift };
    let mut draw = || if cfg.jitter { rng.below(range) } else { 0 };
    let steps = (0..steps)
        .map(|_| {
            let (sy, sx) = (draw(), draw());
            StepWindows {
                ys: axis_origins(height, cfg.window, stride, cfg.wrap, sy),
                xs: axis_origins(width, cfg.window, stride, cfg.wrap, sx),
            }
        })
        .collect();
    Ok(WindowPlan {
        height,
        width,
        window_h: cfg.window.min(height),
        window_w: cfg.window.min(width),
        overlap_min: cfg.overlap_min,
        overlap_max: cfg.window - 1,
        wrap: cfg.wrap,
        steps,
    })
}

impl WindowPlan {
    /// A plan with one full-field window per step.
    pub fn single(height: usize, width: usize, steps: usize) -> Self {
        Self {
            height,
            width,
            window_h: height,
            window_w: width,
            overlap_min: 0,
            overlap_max: height.max(width).saturating_sub(1),
            wrap: false,
            steps: vec![
                StepWindows {
                    ys: vec![0],
                    xs: vec![0]
                };
                steps
            ],
        }
    }

    /// How many windows cover each pixel at `step`, row-major.
    pub fn coverage(&self, step: usize) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for (y0, x0) in self.steps[step].origins() {
            for dy in 0..self.window_h {
                let y = (y0 + dy) % self.height;
                for dx in 0..self.window_w {
                    counts[y * self.width + (x0 + dx) % self.width] += 1;
                }
            }
        }
        counts
    }

    /// Overlaps between consecutive windows along one axis, including the
    /// wrap-around pair when wrapping.
    pub fn axis_overlaps(origins: &[usize], window: usize, len: usize, wrap: bool) -> Vec<usize> {
        let mut out: Vec<usize> = origins
            .windows(2)
            .map(|p| {
                let gap = if p[1] >= p[0] {
                    p[1] - p[0]
                } else {
                    p[1] + len - p[0]
                };
                window.saturating_sub(gap)
            })
            .collect();
        if wrap && origins.len() > 1 {
            let gap = (origins[0] + len - origins[origins.len() - 1]) % len;
            out.push(window.saturating_sub(gap));
        }
        out
    }

    /// Checks full coverage and overlap bounds for every step.
    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.steps.iter().enumerate() {
            if let Some(p) = self.coverage(k).iter().position(|&c| c == 0) {
                return Err(InfiniteError::PlanMismatch(format!(
                    "step {k}: pixel ({}, {}) is not covered",
                    p / self.width,
                    p % self.width
                )));
            }
            for (origins, window, len) in [
                (&s.ys, self.window_h, self.height),
                (&s.xs, self.window_w, self.width),
            ] {
                for o in Self::axis_overlaps(origins, window, len, self.wrap) {
                    if o < self.overlap_min || o > self.overlap_max {
                        return Err(InfiniteError::PlanMismatch(format!(
                            "step {k}: overlap {o} outside [{}, {}]",
                            self.overlap_min, self.overlap_max
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(wrap: bool) -> PlanConfig {
        PlanConfig {
            wrap,
            jitter: false,
            ..Default::default()
        }
    }

    #[test]
    fn single_window_when_field_equals_window() {
        let p = plan_windows(64, 64, PlanConfig::default(), 5, &mut Rng::new(1)).unwrap();
        assert!(p
            .steps
            .iter()
            .all(|s| s.origins().collect::<Vec<_>>() == vec![(0, 0)]));
    }

    #[test]
    fn lattice_arithmetic() {
        let p = plan_windows(64, 96, fixed(false), 1, &mut Rng::new(0)).unwrap();
        assert_eq!(p.steps[0].xs, vec![0, 32]);
        assert_eq!(p.steps[0].ys, vec![0]);
        let w = plan_windows(64, 80, fixed(true), 1, &mut Rng::new(0)).unwrap();
        assert!(w.steps[0].xs.contains(&48) || w.steps[0].xs == vec![0, 32, 64]);
        w.validate().unwrap();
    }

    #[test]
    fn wrapped_window_covers_both_edges() {
        let plan = WindowPlan {
            height: 64,
            width: 80,
            window_h: 64,
            window_w: 64,
            overlap_min: 0,
            overlap_max: 63,
            wrap: true,
            steps: vec![StepWindows {
                ys: vec![0],
                xs: vec![48],
            }],
        };
        let cov = plan.coverage(0);
        let covered: Vec<usize> = (0..80).filter(|&x| cov[x] > 0).collect();
        let expect: Vec<usize> = (48..80)
            .chain(0..32)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        assert_eq!(covered, expect);
    }

    #[test]
    fn overlap_must_be_below_window() {
        let cfg = PlanConfig {
            overlap_min: 64,
            ..Default::default()
        };
        assert!(plan_windows(128, 128, cfg, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn jittered_plans_are_valid() {
        let mut rng = Rng::new(5);
        for (h, w) in [(64, 64), (65, 200), (300, 97), (128, 128)] {
            for wrap in [false, true] {
                let cfg = PlanConfig {
                    wrap,
                    ..Default::default()
                };
                plan_windows(h, w, cfg, 8, &mut rng)
                    .unwrap()
                    .validate()
                    .unwrap();
            }
        }
        for (h, w) in [(1, 1), (10, 33), (63, 70)] {
            plan_windows(h, w, PlanConfig::default().wrapping(), 4, &mut rng)
                .unwrap()
                .validate()
                .unwrap();
        }
    }
}
