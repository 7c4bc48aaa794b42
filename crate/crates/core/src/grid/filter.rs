use super::{Grid, GridError, Result};

/// Lobes of the Lanczos window.
const LOBES: f64 = 3.0;

/// How samples beyond the grid edge are synthesized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Mirror without repeating the edge sample (`c b | a b c | b a`).
    #[default]
    Reflect,
    /// Periodic continuation.
    Circular,
}

impl Boundary {
    #[inline]
    pub(crate) fn fold(self, i: isize, n: usize) -> usize {
        let n = n as isize;
        match self {
            Boundary::Circular => i.rem_euclid(n) as usize,
            Boundary::Reflect => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n - 1);
                let m = i.rem_euclid(period);
                (if m < n { m } else { period - m }) as usize
            }
        }
    }
}

#[inline]
fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Normalized taps `h[-r..=r]` of the windowed-sinc low-pass with cutoff `cutoff`
/// (cycles per sample, Nyquist = 0.5).
pub fn lanczos_kernel(cutoff: f64) -> Result<Vec<f64>> {
    if !(cutoff > 0.0 && cutoff <= 0.5) {
        return Err(GridError::InvalidArgument(format!(
            "cutoff must lie in (0, 0.5], got {cutoff}"
        )));
    }
    let scale = 2.0 * cutoff;
    let radius = (LOBES / scale).floor() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|n| {
            let x = n as f64 * scale;
            if x.abs() >= LOBES {
                0.0
            } else {
                sinc(x) * sinc(x / LOBES)
            }
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

/// Separable Lanczos low-pass with reflective boundaries.
pub fn lanczos_lowpass(g: &Grid, cutoff: f64) -> Result<Grid> {
    lanczos_lowpass_with(g, cutoff, Boundary::Reflect)
}

pub fn lanczos_lowpass_with(g: &Grid, cutoff: f64, boundary: Boundary) -> Result<Grid> {
    g.check_finite()?;
    let taps = lanczos_kernel(cutoff)?;
    let horizontal = convolve_axis(g, &taps, boundary, Axis::X);
    Ok(convolve_axis(&horizontal, &taps, boundary, Axis::Y))
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

fn convolve_axis(g: &Grid, taps: &[f64], boundary: Boundary, axis: Axis) -> Grid {
    let (h, w, c) = g.shape();
    let r = (taps.len() / 2) as isize;
    let mut out = Grid::zeros(h, w, c);
    let src = g.data();
    let dst = out.data_mut();
    match axis {
        Axis::X => {
            for y in 0..h {
                for x in 0..w {
                    let o = (y * w + x) * c;
                    for (k, &t) in taps.iter().enumerate() {
                        let sx = boundary.fold(x as isize + k as isize - r, w);
                        let s = (y * w + sx) * c;
                        for ch in 0..c {
                            dst[o + ch] += t * src[s + ch];
                        }
                    }
                }
            }
        }
        Axis::Y => {
            for y in 0..h {
                for (k, &t) in taps.iter().enumerate() {
                    let sy = boundary.fold(y as isize + k as isize - r, h);
                    let s = sy * w * c;
                    let o = y * w * c;
                    for i in 0..w * c {
                        dst[o + i] += t * src[s + i];
                    }
                }
            }
        }
    }
    out
}
