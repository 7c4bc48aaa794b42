//! Anomaly scoring and adaptive binarization.
//!
//! Score maps arrive with an arbitrary range, are shifted to a zero minimum,
//! and are binarized with a per-image threshold that is the larger of
//!
//! * the skewed Otsu threshold of the image, `otsu(A^beta)^(1/beta)`, and
//! * a global Otsu threshold computed over the per-image skewed thresholds.
//!
//! The global term keeps completely stationary images from being forced to
//! split into two classes.

use rayon::prelude::*;

use crate::features::{box_mean, normalize_pixels, FilterBank};
use crate::grid::{BinaryMask, Grid, GridError};

#[derive(Debug, thiserror::Error)]
pub enum ThresholdError {
    #[error("degenerate histogram: scores contain fewer than two distinct values")]
    DegenerateHistogram,
    #[error("no score maps supplied")]
    NoMaps,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("score map must have one channel, got {0}")]
    NotSingleChannel(usize),
    #[error("image {height}x{width} is smaller than patch {patch}")]
    ImageSmallerThanPatch {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = ThresholdError> = std::result::Result<T, E>;

/// Non-negative per-pixel anomaly scores for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScoreMap {
    scores: Grid,
    source_image_id: String,
}

impl AnomalyScoreMap {
    /// Ingests a single-channel grid, shifting it so the minimum score is 0.
    pub fn from_grid(scores: Grid, source_image_id: impl Into<String>) -> Result<Self> {
        if scores.channels() != 1 {
            return Err(ThresholdError::NotSingleChannel(scores.channels()));
        }
        scores.check_finite()?;
        let (lo, _) = scores.min_max();
        let scores = if lo == 0.0 {
            scores
        } else {
            scores.map(|v| v - lo)
        };
        Ok(Self {
            scores,
            source_image_id: source_image_id.into(),
        })
    }

    pub fn scores(&self) -> &Grid {
        &self.scores
    }

    pub fn source_image_id(&self) -> &str {
        &self.source_image_id
    }

    pub fn height(&self) -> usize {
        self.scores.height()
    }

    pub fn width(&self) -> usize {
        self.scores.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThresholdConfig {
    pub beta: f64,
    pub histogram_bins: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            beta: 1.5,
            histogram_bins: 256,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ThresholdError::InvalidConfig(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.histogram_bins < 2 {
            return Err(ThresholdError::InvalidConfig(format!(
                "need at least 2 bins, got {}",
                self.histogram_bins
            )));
        }
        Ok(())
    }
}

/// Produces score maps for a set of images.
pub trait AnomalyScorer {
    fn score(&self, images: &[Grid]) -> Result<Vec<AnomalyScoreMap>>;
}

/// Default scorer: distance of each pixel's pooled filter-bank energy to the
/// per-channel median descriptor of the whole image set.
#[derive(Clone, Debug)]
pub struct PatchDissimilarityScorer {
    pub patch: usize,
    pub bank: Option<FilterBank>,
}

impl Default for PatchDissimilarityScorer {
    fn default() -> Self {
        Self {
            patch: 7,
            bank: None,
        }
    }
}

impl PatchDissimilarityScorer {
    pub fn new(patch: usize) -> Self {
        Self { patch, bank: None }
    }

    fn descriptors(&self, image: &Grid, bank: &FilterBank) -> Result<Grid> {
        if image.height() < self.patch || image.width() < self.patch {
            return Err(ThresholdError::ImageSmallerThanPatch {
                height: image.height(),
                width: image.width(),
                patch: self.patch,
            });
        }
        let responses = bank.apply(image)?;
        // Local energy is insensitive to the phase of a periodic pattern.
        let energy = responses.map(|v| v * v);
        Ok(box_mean(&energy, self.patch).map(f64::sqrt))
    }
}

impl AnomalyScorer for PatchDissimilarityScorer {
    fn score(&self, images: &[Grid]) -> Result<Vec<AnomalyScoreMap>> {
        if self.patch.is_multiple_of(2) || self.patch == 0 {
            return Err(ThresholdError::InvalidConfig(format!(
                "patch must be odd, got {}",
                self.patch
            )));
        }
        let Some(first) = images.first() else {
            return Err(ThresholdError::NoMaps);
        };
        let bank = self
            .bank
            .clone()
            .unwrap_or_else(|| FilterBank::default_for(first.channels()));
        let descs = images
            .par_iter()
            .map(|img| self.descriptors(img, &bank))
            .collect::<Result<Vec<_>>>()?;
        let dims = bank.out_channels();
        let center: Vec<f64> = (0..dims)
            .map(|c| {
                let mut vals: Vec<f64> = descs
                    .iter()
                    .flat_map(|d| d.data().iter().skip(c).step_by(dims).copied())
                    .collect();
                median(&mut vals)
            })
            .collect();
        descs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let scores = Grid::from_fn(d.height(), d.width(), 1, |y, x, _| {
                    d.pixel(y, x)
                        .iter()
                        .zip(&center)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                });
                AnomalyScoreMap::from_grid(scores, format!("image-{i}"))
            })
            .collect()
    }
}

/// Per-pixel unit-norm filter-bank features (the descriptor backbone).
pub fn pixel_features(image: &Grid, bank: &FilterBank) -> Result<Grid> {
    Ok(normalize_pixels(&bank.apply(image)?))
}

fn median(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Uniform histogram over `[min, max]`: `(counts, min, bin_width)`.
///
/// Sample `v` lands in bin `floor((v - min) / (max - min) * bins)`, with the
/// maximum folded into the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<(Vec<u64>, f64, f64)> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return Err(ThresholdError::DegenerateHistogram);
    }
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[bin_of(v, lo, hi, bins)] += 1;
    }
    Ok((counts, lo, (hi - lo) / bins as f64))
}

#[inline]
pub(crate) fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

/// Between-class variance (up to the constant `1 / n^2`) of the split placing
/// bins `0..=k` in the lower class, from integer class counts and bin-index sums.
#[inline]
pub(crate) fn split_score(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    let d = s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128;
    let d = d as f64;
    d * d / (n0 as f64 * n1 as f64)
}

/// Otsu's threshold of raw values on a `bins`-bin histogram.
///
/// Returns the bin center of the split that maximizes between-class variance.
/// When several splits attain the maximum, the mean of their bin indices is
/// used, which places the threshold mid-valley for well-separated classes.
pub fn otsu_values(values: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(ThresholdError::InvalidConfig(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let (counts, lo, width) = histogram(values, bins)?;
    let total_n: u64 = counts.iter().sum();
    let total_s: u64 = counts.iter().enumerate().map(|(i, c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = f64::NEG_INFINITY;
    let mut arg_sum = 0usize;
    let mut arg_count = 0usize;
    for (k, &c) in counts.iter().enumerate().take(bins - 1) {
        n0 += c;
        s0 += k as u64 * c;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let score = split_score(n0, s0, n1, total_s - s0);
        if score > best {
            best = score;
            arg_sum = k;
            arg_count = 1;
        } else if score == best {
            arg_sum += k;
            arg_count += 1;
        }
    }
    if arg_count == 0 {
        return Err(ThresholdError::DegenerateHistogram);
    }
    let k = arg_sum as f64 / arg_count as f64;
    Ok(lo + (k + 0.5) * width)
}

pub fn otsu(scores: &AnomalyScoreMap, bins: usize) -> Result<f64> {
    otsu_values(scores.scores().data(), bins)
}

/// `otsu(A^beta)^(1/beta)`.
pub fn skewed_threshold(scores: &AnomalyScoreMap, cfg: &ThresholdConfig) -> Result<f64> {
    cfg.validate()?;
    let skewed: Vec<f64> = scores
        .scores()
        .data()
        .iter()
        .map(|v| v.powf(cfg.beta))
        .collect();
    Ok(otsu_values(&skewed, cfg.histogram_bins)?.powf(1.0 / cfg.beta))
}

/// Two-class Otsu split of a small set of scalars, without binning.
///
/// Scans every boundary between distinct sorted values and returns the
/// midpoint of the boundary with the largest between-class variance (first
/// one on ties). A single value, or a set of identical values, is returned
/// unchanged.
pub fn otsu_scalars(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(ThresholdError::NoMaps);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let mut best: Option<(f64, usize)> = None;
    let mut prefix = 0.0;
    for k in 0..n - 1 {
        prefix += sorted[k];
        if sorted[k] == sorted[k + 1] {
            continue;
        }
        let n0 = (k + 1) as f64;
        let n1 = (n - k - 1) as f64;
        let m0 = prefix / n0;
        let m1 = (total - prefix) / n1;
        let score = n0 * n1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, k));
        }
    }
    Ok(match best {
        Some((_, k)) => 0.5 * (sorted[k] + sorted[k + 1]),
        None => sorted[0],
    })
}

/// Per-image thresholds `max(otsu({T_j}), T_i)` over the skewed thresholds `T_j`.
pub fn combined_thresholds(maps: &[AnomalyScoreMap], cfg: &ThresholdConfig) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return Err(ThresholdError::NoMaps);
    }
    let local = local_thresholds(maps, cfg)?;
    let global = otsu_scalars(&local)?;
    Ok(local.into_iter().map(|t| t.max(global)).collect())
}

/// The per-image skewed thresholds alone.
pub fn local_thresholds(maps: &[AnomalyScoreMap], cfg: &ThresholdConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    maps.par_iter().map(|m| skewed_threshold(m, cfg)).collect()
}

/// True where the score is strictly greater than `threshold`.
pub fn binarize(scores: &AnomalyScoreMap, threshold: f64) -> BinaryMask {
    BinaryMask::from_grid_above(scores.scores(), threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn map(values: Vec<f64>, w: usize) -> AnomalyScoreMap {
        let h = values.len() / w;
        AnomalyScoreMap::from_grid(Grid::from_vec(h, w, 1, values).unwrap(), "t").unwrap()
    }

    /// Exhaustive oracle: for every candidate split recount both classes from the
    /// raw samples, then apply the same tie rule.
    fn otsu_oracle(values: &[f64], bins: usize) -> f64 {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut scores = Vec::new();
        for k in 0..bins - 1 {
            let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
            for &v in values {
                let b = bin_of(v, lo, hi, bins);
                if b <= k {
                    n0 += 1;
                    s0 += b as u64;
                } else {
                    n1 += 1;
                    s1 += b as u64;
                }
            }
            if n0 > 0 && n1 > 0 {
                scores.push((k, split_score(n0, s0, n1, s1)));
            }
        }
        let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = scores.iter().filter(|s| s.1 == best).map(|s| s.0).collect();
        let k = ties.iter().sum::<usize>() as f64 / ties.len() as f64;
        lo + (k + 0.5) * width
    }

    #[test]
    fn two_point_mass_threshold_is_mid_valley() {
        let mut v = vec![0.1; 50];
        v.extend(vec![0.9; 50]);
        let t = otsu_values(&v, 256).unwrap();
        let bin = 0.8 / 256.0;
        assert!((t - 0.5).abs() <= bin, "t = {t}");
    }

    #[test]
    fn two_valued_map_threshold_strictly_between() {
        for (a, b) in [(0.0, 1.0), (3.0, 3.5), (0.2, 100.0)] {
            let v: Vec<f64> = (0..37).map(|i| if i % 3 == 0 { b } else { a }).collect();
            let t = otsu_values(&v, 256).unwrap();
            assert!(t > a && t < b, "{a} {b} -> {t}");
        }
    }

    #[test]
    fn otsu_matches_exhaustive_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let n = 20 + rng.below(300);
            let v: Vec<f64> = (0..n).map(|_| rng.uniform().powi(3) * 5.0).collect();
            assert_eq!(otsu_values(&v, 256).unwrap(), otsu_oracle(&v, 256));
        }
    }

    #[test]
    fn constant_map_is_degenerate() {
        assert!(matches!(
            otsu(&map(vec![0.3; 16], 4), 256),
            Err(ThresholdError::DegenerateHistogram)
        ));
    }

    #[test]
    fn beta_one_equals_plain_otsu() {
        let mut rng = Rng::new(4);
        let m = map((0..400).map(|_| rng.uniform()).collect(), 20);
        let cfg = ThresholdConfig {
            beta: 1.0,
            ..Default::default()
        };
        assert_eq!(skewed_threshold(&m, &cfg).unwrap(), otsu(&m, 256).unwrap());
    }

    #[test]
    fn skewed_threshold_scales_with_scores() {
        let mut rng = Rng::new(5);
        let base: Vec<f64> = (0..400).map(|_| rng.uniform()).collect();
        let cfg = ThresholdConfig::default();
        let t = skewed_threshold(&map(base.clone(), 20), &cfg).unwrap();
        for k in [0.5, 3.0, 17.0] {
            let scaled = map(base.iter().map(|v| v * k).collect(), 20);
            let tk = skewed_threshold(&scaled, &cfg).unwrap();
            assert!((tk / (k * t) - 1.0).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn ingest_shifts_to_zero_min() {
        let m = map(vec![2.0, 3.0, 5.0, 2.5], 2);
        assert_eq!(m.scores().data(), &[0.0, 1.0, 3.0, 0.5]);
        assert!(AnomalyScoreMap::from_grid(Grid::zeros(2, 2, 3), "x").is_err());
    }

    #[test]
    fn combined_single_map_is_local() {
        let mut rng = Rng::new(8);
        let m = map((0..400).map(|_| rng.uniform()).collect(), 20);
        let cfg = ThresholdConfig::default();
        let local = skewed_threshold(&m, &cfg).unwrap();
        assert_eq!(combined_thresholds(&[m], &cfg).unwrap(), vec![local]);
    }

    #[test]
    fn identical_maps_share_threshold() {
        let mut rng = Rng::new(8);
        let m = map((0..400).map(|_| rng.uniform()).collect(), 20);
        let cfg = ThresholdConfig::default();
        let local = skewed_threshold(&m, &cfg).unwrap();
        let all = combined_thresholds(&vec![m; 5], &cfg).unwrap();
        assert!(all.iter().all(|&t| t == local));
    }

    #[test]
    fn combined_rejects_empty() {
        assert!(matches!(
            combined_thresholds(&[], &ThresholdConfig::default()),
            Err(ThresholdError::NoMaps)
        ));
    }

    #[test]
    fn otsu_scalars_splits_outlier() {
        let t = otsu_scalars(&[0.5, 0.52, 0.49, 0.51, 2.0]).unwrap();
        assert!((t - (0.52 + 2.0) / 2.0).abs() < 1e-12);
        assert_eq!(otsu_scalars(&[0.7, 0.7]).unwrap(), 0.7);
    }

    #[test]
    fn binarize_is_strict() {
        let m = map(vec![0.0, 0.5, 1.0, 0.5], 2);
        assert_eq!(binarize(&m, 1.0).count(), 0);
        assert_eq!(binarize(&m, -0.1).count(), 4);
        assert_eq!(binarize(&m, 0.5).bits(), &[false, false, true, false]);
    }

    #[test]
    fn constant_image_scores_zero() {
        let imgs = vec![Grid::filled(16, 16, 1, 0.4); 2];
        let maps = PatchDissimilarityScorer::default().score(&imgs).unwrap();
        assert!(maps
            .iter()
            .all(|m| m.scores().data().iter().all(|&v| v.abs() < 1e-12)));
    }

    #[test]
    fn scorer_rejects_small_images() {
        let imgs = vec![Grid::filled(5, 5, 1, 0.4)];
        assert!(matches!(
            PatchDissimilarityScorer::default().score(&imgs),
            Err(ThresholdError::ImageSmallerThanPatch { .. })
        ));
    }

    fn checkerboard(n: usize, blob: Option<(usize, usize)>) -> Grid {
        Grid::from_fn(n, n, 1, |y, x, _| {
            let v = ((x + y) % 2) as f64;
            match blob {
                Some((lo, hi)) if (lo..hi).contains(&y) && (lo..hi).contains(&x) => 1.0 - v,
                _ => v,
            }
        })
    }

    #[test]
    fn periodic_checkerboard_has_no_outliers() {
        let maps = PatchDissimilarityScorer::default()
            .score(&[checkerboard(64, None)])
            .unwrap();
        let mut v = maps[0].scores().data().to_vec();
        v.sort_by(f64::total_cmp);
        let (median, max) = (v[v.len() / 2], v[v.len() - 1]);
        assert!(
            max <= 2.0 * median || max < 1e-9,
            "max {max} median {median}"
        );
    }

    #[test]
    fn inverted_phase_blob_ranks_highest() {
        let n = 64;
        let (lo, hi) = (24, 32);
        let maps = PatchDissimilarityScorer::default()
            .score(&[checkerboard(n, Some((lo, hi)))])
            .unwrap();
        let d = maps[0].scores().data();
        let mut idx: Vec<usize> = (0..n * n).collect();
        idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
        let top = BinaryMask::from_fn(n, n, |y, x| idx[..n * n / 100].contains(&(y * n + x)));
        let truth =
            BinaryMask::from_fn(n, n, |y, x| (lo..hi).contains(&y) && (lo..hi).contains(&x));
        assert!(top.iou(&truth) >= 0.5, "iou {}", top.iou(&truth));
    }
}
