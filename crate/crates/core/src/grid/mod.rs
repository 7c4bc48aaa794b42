//! Dense multi-channel 2-D grids and label maps.
//!
//! Every image, score map, noise field and denoiser output in the crate is a
//! [`Grid`]: row-major, channel-interleaved `f64` samples. Label maps are kept
//! separately as [`LabelMap`] so that integer classes are never interpolated.

mod filter;
mod io;
mod mask;
mod resample;

pub use filter::{lanczos_kernel, lanczos_lowpass, lanczos_lowpass_with, Boundary};
pub use io::{
    decode_label_png, decode_png8, decode_txf1, encode_label_png, encode_png8, encode_txf1,
    label_color, read_grid, read_label_png, write_grid, write_label_png, GridFormat, TXF1_MAGIC,
};
pub use mask::BinaryMask;
pub use resample::{resample, resample_with, ResampleMode};

use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("data length {got} does not match {height}x{width}x{channels}")]
    LengthMismatch {
        height: usize,
        width: usize,
        channels: usize,
        got: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("label {label} exceeds class count {num_classes}")]
    LabelOutOfRange { label: u8, num_classes: u8 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;

/// Spacing of the noise lattice. Multiples below 16 in magnitude are exact `f32` values.
pub const NOISE_QUANTUM: f64 = 1.0 / (1u64 << 20) as f64;

#[inline]
fn snap(v: f64) -> f64 {
    let q = (v / NOISE_QUANTUM).round() * NOISE_QUANTUM;
    if q.abs() < 16.0 {
        q
    } else {
        v as f32 as f64
    }
}

/// A `height x width x channels` grid of real samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a grid from raw samples, rejecting wrong lengths and non-finite values.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(GridError::LengthMismatch {
                height,
                width,
                channels,
                got: data.len(),
            });
        }
        let grid = Self {
            height,
            width,
            channels,
            data,
        };
        grid.check_finite()?;
        Ok(grid)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// I.i.d. standard normal samples snapped to [`NOISE_QUANTUM`].
    ///
    /// Lattice values survive a TXF1 round trip unchanged, and sums and
    /// differences of a few lattice fields are exact in `f64`.
    pub fn standard_normal(height: usize, width: usize, channels: usize, rng: &mut Rng) -> Self {
        let data = (0..height * width * channels)
            .map(|_| snap(rng.normal()))
            .collect();
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Every sample rounded to the nearest multiple of [`NOISE_QUANTUM`].
    pub fn snapped(&self) -> Grid {
        self.map(snap)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(GridError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn ensure_same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(GridError::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, mut f: impl FnMut(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other)?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Grid, scale: f64) -> Result<Grid> {
        self.zip_map(other, |a, b| a + scale * b)
    }

    /// Single-channel copy of channel `c`.
    pub fn channel(&self, c: usize) -> Grid {
        assert!(c < self.channels);
        Grid {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .copied()
                .collect(),
        }
    }

    /// Mean of each channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels.max(1)) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Population variance of each channel.
    pub fn channel_variances(&self) -> Vec<f64> {
        let means = self.channel_means();
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels.max(1)) {
            for ((s, v), m) in sums.iter_mut().zip(px).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copies the `h x w` block starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Grid> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(GridError::InvalidArgument(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Grid::zeros(h, w, self.channels);
        for y in 0..h {
            let src = self.index(y0 + y, x0, 0);
            let dst = out.index(y, 0, 0);
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        Ok(out)
    }

    /// Copies an `h x w` block whose rows and columns wrap around the grid edges.
    pub fn crop_wrapped(&self, y0: usize, x0: usize, h: usize, w: usize) -> Grid {
        let mut out = Grid::zeros(h, w, self.channels);
        for y in 0..h {
            let sy = (y0 + y) % self.height;
            for x in 0..w {
                let sx = (x0 + x) % self.width;
                out.pixel_mut(y, x).copy_from_slice(self.pixel(sy, sx));
            }
        }
        out
    }

    /// Writes `patch` into `self` at `(y0, x0)`.
    pub fn paste(&mut self, y0: usize, x0: usize, patch: &Grid) -> Result<()> {
        if patch.channels != self.channels
            || y0 + patch.height > self.height
            || x0 + patch.width > self.width
        {
            return Err(GridError::ShapeMismatch(self.shape(), patch.shape()));
        }
        for y in 0..patch.height {
            let dst = self.index(y0 + y, x0, 0);
            let src = patch.index(y, 0, 0);
            let n = patch.width * self.channels;
            self.data[dst..dst + n].copy_from_slice(&patch.data[src..src + n]);
        }
        Ok(())
    }

    /// Tiles the grid `reps_y x reps_x` times.
    pub fn tile(&self, reps_y: usize, reps_x: usize) -> Grid {
        self.crop_wrapped(0, 0, self.height * reps_y, self.width * reps_x)
    }

    pub fn mean_abs_diff(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s / self.data.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Bytes held by the sample buffer.
    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

/// Per-pixel semantic classes: 0 is the normal texture, `1..=num_classes` are feature types.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(GridError::LengthMismatch {
                height,
                width,
                channels: 1,
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l > num_classes) {
            return Err(GridError::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    /// A map with every pixel set to `label`.
    pub fn uniform(height: usize, width: usize, num_classes: u8, label: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) -> Result<()> {
        if label > self.num_classes {
            return Err(GridError::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        self.labels[y * self.width + x] = label;
        Ok(())
    }

    /// Re-validates the map against a (possibly larger) class count.
    pub fn with_num_classes(self, num_classes: u8) -> Result<Self> {
        Self::new(self.height, self.width, num_classes, self.labels)
    }

    /// Nearest-neighbour resize; the only resampling allowed for labels.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<LabelMap> {
        self.resample(height, width, ResampleMode::Nearest)
    }

    pub fn resample(&self, height: usize, width: usize, mode: ResampleMode) -> Result<LabelMap> {
        if mode != ResampleMode::Nearest {
            return Err(GridError::InvalidArgument(format!(
                "label maps can only be resampled with nearest mode, got {mode:?}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(GridError::InvalidArgument(
                "target dims must be >= 1".into(),
            ));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let labels = (0..height)
            .flat_map(|y| {
                let sy = resample::nearest_index(y, self.height, height);
                (0..width).map(move |x| (sy, resample::nearest_index(x, self.width, width)))
            })
            .map(|(sy, sx)| self.get(sy, sx))
            .collect();
        Ok(LabelMap {
            height,
            width,
            num_classes: self.num_classes,
            labels,
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LabelMap> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(GridError::InvalidArgument(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(self.crop_wrapped(y0, x0, h, w))
    }

    pub fn crop_wrapped(&self, y0: usize, x0: usize, h: usize, w: usize) -> LabelMap {
        let labels = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.get((y0 + y) % self.height, (x0 + x) % self.width))
            .collect();
        LabelMap {
            height: h,
            width: w,
            num_classes: self.num_classes,
            labels,
        }
    }

    /// The labels as a single-channel grid (for display or export only).
    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// Counts of each label `0..=num_classes`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes as usize + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(matches!(
            Grid::from_vec(2, 2, 1, vec![0.0; 3]),
            Err(GridError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Grid::from_vec(1, 2, 1, vec![0.0, f64::NAN]),
            Err(GridError::NonFinite(1))
        ));
        assert!(Grid::from_vec(1, 2, 1, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn crop_wrapped_wraps_columns() {
        let g = Grid::from_fn(2, 80, 1, |_, x, _| x as f64);
        let w = g.crop_wrapped(0, 48, 2, 64);
        let cols: Vec<f64> = (0..64).map(|x| w.get(0, x, 0)).collect();
        let expected: Vec<f64> = (48..80).chain(0..32).map(|x| x as f64).collect();
        assert_eq!(cols, expected);
    }

    #[test]
    fn paste_round_trips_crop() {
        let g = Grid::from_fn(5, 6, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let patch = g.crop(1, 2, 3, 3).unwrap();
        let mut z = Grid::zeros(5, 6, 2);
        z.paste(1, 2, &patch).unwrap();
        assert_eq!(z.get(2, 3, 1), g.get(2, 3, 1));
        assert_eq!(z.get(0, 0, 0), 0.0);
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        assert!(LabelMap::new(1, 2, 1, vec![0, 2]).is_err());
        let mut m = LabelMap::uniform(2, 2, 3, 0).unwrap();
        assert!(m.set(0, 0, 4).is_err());
        m.set(0, 0, 3).unwrap();
        assert_eq!(m.histogram(), vec![3, 0, 0, 1]);
    }

    #[test]
    fn label_map_only_resamples_nearest() {
        let m = LabelMap::uniform(4, 4, 2, 1).unwrap();
        assert!(m.resample(2, 2, ResampleMode::BoxDown).is_err());
        assert!(m.resample(2, 2, ResampleMode::Lanczos).is_err());
        let up = m.resize_nearest(8, 8).unwrap();
        assert!(up.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn statistics() {
        let g = Grid::from_vec(1, 4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.channel_means(), vec![2.5]);
        assert_eq!(g.channel_variances(), vec![1.25]);
        assert_eq!(g.min_max(), (1.0, 4.0));
    }
}
