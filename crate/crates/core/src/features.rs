//! Fixed random filter-bank descriptors.
//!
//! Stands in for a pretrained backbone: a seeded bank of zero-mean 5x5 filters
//! applied over all input channels. The same bank feeds the default anomaly
//! scorer and the region descriptors used for contrastive training.

use crate::grid::{Boundary, Grid, GridError};
use crate::rng::Rng;

pub const DEFAULT_FILTERS: usize = 64;
pub const DEFAULT_FILTER_SIZE: usize = 5;
pub const DEFAULT_BANK_SEED: u64 = 0x5eed_f11e;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    size: usize,
    in_channels: usize,
    out_channels: usize,
    /// `[out][dy][dx][in]`
    weights: Vec<f64>,
}

impl FilterBank {
    /// Zero-mean Gaussian filters normalized to unit L2 norm.
    pub fn random(in_channels: usize, out_channels: usize, size: usize, seed: u64) -> Self {
        assert!(size % 2 == 1, "filter size must be odd");
        let mut rng = Rng::new(seed);
        let taps = size * size * in_channels;
        let mut weights = Vec::with_capacity(taps * out_channels);
        for _ in 0..out_channels {
            let mut f: Vec<f64> = (0..taps).map(|_| rng.normal()).collect();
            let mean = f.iter().sum::<f64>() / taps as f64;
            f.iter_mut().for_each(|v| *v -= mean);
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            f.iter_mut().for_each(|v| *v /= norm);
            weights.extend(f);
        }
        Self {
            size,
            in_channels,
            out_channels,
            weights,
        }
    }

    pub fn default_for(in_channels: usize) -> Self {
        Self::random(
            in_channels,
            DEFAULT_FILTERS,
            DEFAULT_FILTER_SIZE,
            DEFAULT_BANK_SEED,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Per-pixel responses, `out_channels` deep, with reflective boundaries.
    pub fn apply(&self, image: &Grid) -> Result<Grid, GridError> {
        if image.channels() != self.in_channels {
            return Err(GridError::InvalidArgument(format!(
                "filter bank expects {} channels, got {}",
                self.in_channels,
                image.channels()
            )));
        }
        let (h, w, c) = image.shape();
        let r = (self.size / 2) as isize;
        let mut out = Grid::zeros(h, w, self.out_channels);
        let mut patch = vec![0.0; self.size * self.size * c];
        for y in 0..h {
            for x in 0..w {
                let mut k = 0;
                for dy in -r..=r {
                    let sy = Boundary::Reflect.fold(y as isize + dy, h);
                    for dx in -r..=r {
                        let sx = Boundary::Reflect.fold(x as isize + dx, w);
                        patch[k..k + c].copy_from_slice(image.pixel(sy, sx));
                        k += c;
                    }
                }
                let px = out.pixel_mut(y, x);
                for (o, filt) in px.iter_mut().zip(self.weights.chunks_exact(patch.len())) {
                    *o = filt.iter().zip(&patch).map(|(a, b)| a * b).sum();
                }
            }
        }
        Ok(out)
    }
}

/// Mean over a `patch x patch` window, per channel, reflective boundaries.
pub fn box_mean(g: &Grid, patch: usize) -> Grid {
    let taps = vec![1.0 / patch as f64; patch];
    let (h, w, c) = g.shape();
    let r = (patch / 2) as isize;
    let mut tmp = Grid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for (k, t) in taps.iter().enumerate() {
                let sx = Boundary::Reflect.fold(x as isize + k as isize - r, w);
                for ch in 0..c {
                    let v = tmp.get(y, x, ch) + t * g.get(y, sx, ch);
                    tmp.set(y, x, ch, v);
                }
            }
        }
    }
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let sy = Boundary::Reflect.fold(y as isize + k as isize - r, h);
            for x in 0..w {
                for ch in 0..c {
                    let v = out.get(y, x, ch) + t * tmp.get(sy, x, ch);
                    out.set(y, x, ch, v);
                }
            }
        }
    }
    out
}

/// Scales every pixel's feature vector to unit L2 norm (zero vectors stay zero).
pub fn normalize_pixels(g: &Grid) -> Grid {
    let mut out = g.clone();
    let c = g.channels();
    for px in out.data_mut().chunks_exact_mut(c) {
        let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            px.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}
