use super::{Grid, GridError, Result};

/// Per-pixel boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(GridError::LengthMismatch {
                height,
                width,
                channels: 1,
                got: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self {
            height,
            width,
            bits,
        }
    }

    /// Pixels with a sample strictly above `threshold` in channel 0.
    pub fn from_grid_above(g: &Grid, threshold: f64) -> Self {
        Self::from_fn(g.height(), g.width(), |y, x| g.get(y, x, 0) > threshold)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Inclusive-exclusive bounding box `(y0, x0, y1, x1)` of the true pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => {
                            (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1))
                        }
                    });
                }
            }
        }
        bb
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<BinaryMask> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(GridError::InvalidArgument(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x)))
    }

    /// Intersection over union with another mask of the same shape.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Mask as a 0/1 single-channel grid.
    pub fn to_grid(&self) -> Grid {
        Grid::from_fn(self.height, self.width, 1, |y, x, _| {
            self.get(y, x) as u8 as f64
        })
    }
}
