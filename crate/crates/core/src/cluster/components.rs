use crate::grid::{BinaryMask, Grid};

use super::{ClusterError, Result};

/// Components smaller than this are dropped after erosion.
pub const MIN_REGION_PIXELS: usize = 12;

/// An 8-connected group of mask pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub image_id: usize,
    /// Linear `y * width + x` indices, ascending.
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// A component with its unit-norm descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub image_id: usize,
    pub pixels: Vec<usize>,
    pub descriptor: Vec<f64>,
}

/// 2x2 erosion anchored at the top-left: a pixel survives when it and its
/// right, lower and lower-right neighbours are all set (outside counts as unset).
pub fn erode_2x2(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        y + 1 < h
            && x + 1 < w
            && mask.get(y, x)
            && mask.get(y, x + 1)
            && mask.get(y + 1, x)
            && mask.get(y + 1, x + 1)
    })
}

/// 8-connected components in raster order of their first pixel.
pub fn label_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && mask.bits()[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Drops components smaller than `min_pixels`.
pub fn size_filter(mask: &BinaryMask, min_pixels: usize) -> BinaryMask {
    let mut out = BinaryMask::empty(mask.height(), mask.width());
    let w = mask.width();
    for comp in label_components(mask) {
        if comp.len() >= min_pixels {
            for i in comp {
                out.set(i / w, i % w, true);
            }
        }
    }
    out
}

/// Binarization cleanup: 2x2 erosion followed by the minimum-size filter.
pub fn cleanup(mask: &BinaryMask) -> BinaryMask {
    size_filter(&erode_2x2(mask), MIN_REGION_PIXELS)
}

/// Regions of a binary mask after cleanup.
pub fn connected_components(mask: &BinaryMask, image_id: usize) -> Vec<Component> {
    label_components(&cleanup(mask))
        .into_iter()
        .map(|pixels| Component { image_id, pixels })
        .collect()
}

/// Softmax(score)-weighted mean of the component's feature vectors, L2-normalized.
pub fn region_descriptor(component: &Component, features: &Grid, scores: &Grid) -> Result<Region> {
    if component.is_empty() {
        return Err(ClusterError::EmptyRegion);
    }
    let c = features.channels();
    let w = features.width();
    let max = component
        .pixels
        .iter()
        .map(|&i| scores.data()[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc = vec![0.0; c];
    let mut total = 0.0;
    for &i in &component.pixels {
        let wgt = (scores.data()[i] - max).exp();
        total += wgt;
        for (a, f) in acc.iter_mut().zip(features.pixel(i / w, i % w)) {
            *a += wgt * f;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !(total > 0.0) {
        return Err(ClusterError::DegenerateDescriptor);
    }
    Ok(Region {
        image_id: component.image_id,
        pixels: component.pixels.clone(),
        descriptor: acc.into_iter().map(|v| v / norm).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(h: usize, w: usize, rects: &[(usize, usize, usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            rects
                .iter()
                .any(|&(y0, x0, hh, ww)| (y0..y0 + hh).contains(&y) && (x0..x0 + ww).contains(&x))
        })
    }

    #[test]
    fn two_five_by_five_blocks_give_two_sixteen_pixel_regions() {
        let m = blocks(20, 20, &[(1, 1, 5, 5), (10, 10, 5, 5)]);
        let regions = connected_components(&m, 0);
        assert_eq!(regions.len(), 2);
        assert!(regions.iter().all(|r| r.len() == 16));
    }

    #[test]
    fn three_by_three_blob_is_dropped() {
        let m = blocks(10, 10, &[(2, 2, 3, 3)]);
        assert!(connected_components(&m, 0).is_empty());
    }

    #[test]
    fn empty_mask_has_no_regions() {
        assert!(connected_components(&BinaryMask::empty(8, 8), 0).is_empty());
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        let m = blocks(12, 12, &[(0, 0, 2, 2), (2, 2, 2, 2)]);
        assert_eq!(label_components(&m).len(), 1);
    }

    #[test]
    fn size_filter_is_idempotent() {
        let m = blocks(30, 30, &[(0, 0, 4, 4), (10, 10, 2, 5), (20, 3, 7, 7)]);
        let once = size_filter(&m, MIN_REGION_PIXELS);
        assert_eq!(size_filter(&once, MIN_REGION_PIXELS), once);
    }

    #[test]
    fn uniform_scores_give_plain_mean() {
        let features = Grid::from_fn(2, 2, 2, |y, x, c| (y * 2 + x) as f64 + c as f64 * 10.0);
        let comp = Component {
            image_id: 0,
            pixels: vec![0, 1, 2, 3],
        };
        let r = region_descriptor(&comp, &features, &Grid::filled(2, 2, 1, 0.3)).unwrap();
        let mean = [1.5f64, 11.5];
        let n = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!((r.descriptor[0] - mean[0] / n).abs() < 1e-12);
        assert!((r.descriptor[1] - mean[1] / n).abs() < 1e-12);
    }

    #[test]
    fn dominant_score_selects_its_pixel() {
        let features = Grid::from_fn(1, 3, 2, |_, x, c| if c == 0 { x as f64 + 1.0 } else { 2.0 });
        let scores = Grid::from_vec(1, 3, 1, vec![0.0, 100.0, 0.0]).unwrap();
        let comp = Component {
            image_id: 0,
            pixels: vec![0, 1, 2],
        };
        let r = region_descriptor(&comp, &features, &scores).unwrap();
        let n = 8f64.sqrt();
        assert!((r.descriptor[0] - 2.0 / n).abs() < 1e-9);
        assert!((r.descriptor[1] - 2.0 / n).abs() < 1e-9);
        let norm: f64 = r.descriptor.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_region_is_an_error() {
        let comp = Component {
            image_id: 0,
            pixels: vec![],
        };
        assert!(matches!(
            region_descriptor(&comp, &Grid::zeros(1, 1, 1), &Grid::zeros(1, 1, 1)),
            Err(ClusterError::EmptyRegion)
        ));
    }
}
