use super::filter::Boundary;
use super::{Grid, GridError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    /// Nearest sample; the only mode valid for label maps.
    Nearest,
    /// Exact area average. Downscaling only.
    BoxDown,
    /// Lanczos-3 interpolation, widened when downscaling.
    Lanczos,
}

#[inline]
pub(crate) fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// Resizes `g` to `new_h x new_w`.
pub fn resample(g: &Grid, new_h: usize, new_w: usize, mode: ResampleMode) -> Result<Grid> {
    resample_with(g, new_h, new_w, mode, Boundary::Reflect)
}

/// [`resample`] with a chosen edge handling for the Lanczos taps.
pub fn resample_with(
    g: &Grid,
    new_h: usize,
    new_w: usize,
    mode: ResampleMode,
    boundary: Boundary,
) -> Result<Grid> {
    if new_h == 0 || new_w == 0 {
        return Err(GridError::InvalidArgument(
            "target dims must be >= 1".into(),
        ));
    }
    if new_h == g.height() && new_w == g.width() {
        return Ok(g.clone());
    }
    if mode == ResampleMode::BoxDown && (new_h > g.height() || new_w > g.width()) {
        return Err(GridError::InvalidArgument(format!(
            "box_down cannot upscale {}x{} to {new_h}x{new_w}",
            g.height(),
            g.width()
        )));
    }
    let rows = axis_weights(g.height(), new_h, mode, boundary);
    let cols = axis_weights(g.width(), new_w, mode, boundary);
    let c = g.channels();
    let mut tmp = Grid::zeros(g.height(), new_w, c);
    for y in 0..g.height() {
        for (x, taps) in cols.iter().enumerate() {
            let out = tmp.pixel_mut(y, x);
            for &(sx, wgt) in taps {
                for (o, v) in out.iter_mut().zip(g.pixel(y, sx)) {
                    *o += wgt * v;
                }
            }
        }
    }
    let mut out = Grid::zeros(new_h, new_w, c);
    for (y, taps) in rows.iter().enumerate() {
        for &(sy, wgt) in taps {
            let src = tmp.index(sy, 0, 0);
            let dst = out.index(y, 0, 0);
            for i in 0..new_w * c {
                out.data_mut()[dst + i] += wgt * tmp.data()[src + i];
            }
        }
    }
    Ok(out)
}

/// Per output index, the contributing `(source index, weight)` pairs.
fn axis_weights(
    src: usize,
    dst: usize,
    mode: ResampleMode,
    boundary: Boundary,
) -> Vec<Vec<(usize, f64)>> {
    if src == dst {
        return (0..dst).map(|i| vec![(i, 1.0)]).collect();
    }
    let ratio = src as f64 / dst as f64;
    match mode {
        ResampleMode::Nearest => (0..dst)
            .map(|i| vec![(nearest_index(i, src, dst), 1.0)])
            .collect(),
        ResampleMode::BoxDown => (0..dst)
            .map(|i| {
                let lo = i as f64 * ratio;
                let hi = (i + 1) as f64 * ratio;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(src);
                (first..last)
                    .filter_map(|j| {
                        let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                        (overlap > 0.0).then_some((j, overlap / ratio))
                    })
                    .collect()
            })
            .collect(),
        ResampleMode::Lanczos => {
            let support = ratio.max(1.0);
            let a = 3.0;
            (0..dst)
                .map(|i| {
                    let center = (i as f64 + 0.5) * ratio - 0.5;
                    let reach = (a * support).ceil() as isize;
                    let mid = center.floor() as isize;
                    let mut taps: Vec<(usize, f64)> = Vec::new();
                    for j in (mid - reach)..=(mid + reach + 1) {
                        let t = (j as f64 - center) / support;
                        if t.abs() >= a {
                            continue;
                        }
                        let wgt = lanczos3(t);
                        if wgt == 0.0 {
                            continue;
                        }
                        let sj = boundary.fold(j, src);
                        match taps.iter_mut().find(|(k, _)| *k == sj) {
                            Some(e) => e.1 += wgt,
                            None => taps.push((sj, wgt)),
                        }
                    }
                    let sum: f64 = taps.iter().map(|t| t.1).sum();
                    taps.iter_mut().for_each(|t| t.1 /= sum);
                    taps
                })
                .collect()
        }
    }
}

fn lanczos3(t: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let pt = std::f64::consts::PI * t;
    3.0 * pt.sin() * (pt / 3.0).sin() / (pt * pt)
}
