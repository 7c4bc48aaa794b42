//! The detect and segment stages end to end: images to score maps to binary
//! masks, then masks to per-pixel feature labels.

use serde::{Deserialize, Serialize};

use crate::cluster::{
    cleanup, connected_components, label_components, label_pixels, mine_pairs, region_descriptor,
    train_embedder, ClusterError, Embedder, NegativeSampling, PairMiningConfig, Region,
    RegionPairSet, TrainConfig, DEFAULT_DISCARD_FRACTION, DEFAULT_POSITIVES,
};
use crate::features::FilterBank;
use crate::grid::{BinaryMask, Grid, LabelMap};
use crate::rng::Rng;
use crate::threshold::{
    binarize, combined_thresholds, local_thresholds, pixel_features, AnomalyScoreMap,
    AnomalyScorer, PatchDissimilarityScorer, ThresholdConfig,
};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub threshold: ThresholdConfig,
    pub patch: usize,
    /// Take the max with the global threshold over all images; off gives the
    /// per-image skewed threshold alone.
    pub global_term: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdConfig::default(),
            patch: 7,
            global_term: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detection {
    pub scores: Vec<AnomalyScoreMap>,
    pub thresholds: Vec<f64>,
    pub masks: Vec<BinaryMask>,
}

/// Thresholds and binarizes already computed score maps.
pub fn binarize_maps(
    maps: &[AnomalyScoreMap],
    cfg: &DetectConfig,
) -> Result<(Vec<f64>, Vec<BinaryMask>)> {
    let thresholds = if cfg.global_term {
        combined_thresholds(maps, &cfg.threshold)?
    } else {
        local_thresholds(maps, &cfg.threshold)?
    };
    let masks = maps
        .iter()
        .zip(&thresholds)
        .map(|(m, &t)| binarize(m, t))
        .collect();
    Ok((thresholds, masks))
}

pub fn detect(images: &[Grid], cfg: &DetectConfig) -> Result<Detection> {
    let scores = PatchDissimilarityScorer::new(cfg.patch).score(images)?;
    let (thresholds, masks) = binarize_maps(&scores, cfg)?;
    Ok(Detection {
        scores,
        thresholds,
        masks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub classes: usize,
    pub positives: usize,
    /// Precluster count; 0 means the same as `classes`.
    pub preclusters: usize,
    pub discard_fraction: f64,
    pub sampling: NegativeSampling,
    pub train: TrainConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            positives: DEFAULT_POSITIVES,
            preclusters: 0,
            discard_fraction: DEFAULT_DISCARD_FRACTION,
            sampling: NegativeSampling::Stratified,
            train: TrainConfig::default(),
        }
    }
}

impl SegmentConfig {
    pub fn mining(&self) -> PairMiningConfig {
        PairMiningConfig {
            positives: self.positives,
            preclusters: if self.preclusters == 0 {
                self.classes
            } else {
                self.preclusters
            },
            discard_fraction: self.discard_fraction,
            sampling: self.sampling,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub labels: Vec<LabelMap>,
    pub regions: Vec<Region>,
    /// Mask pixels that were labelled: components of the input masks that
    /// survive cleanup, at their original extent.
    pub masks: Vec<BinaryMask>,
    pub pairs: Option<RegionPairSet>,
    pub embedder: Option<Embedder>,
    pub losses: Vec<f64>,
}

/// Components of `original` that keep at least one pixel in `cleaned`.
pub fn surviving_components(original: &BinaryMask, cleaned: &BinaryMask) -> BinaryMask {
    let w = original.width();
    let mut out = BinaryMask::empty(original.height(), w);
    for comp in label_components(original) {
        if comp.iter().any(|&i| cleaned.bits()[i]) {
            for i in comp {
                out.set(i / w, i % w, true);
            }
        }
    }
    out
}

/// Regions, pair mining, contrastive training and pixel clustering.
pub fn segment(
    images: &[Grid],
    scores: &[AnomalyScoreMap],
    masks: &[BinaryMask],
    cfg: &SegmentConfig,
    rng: &mut Rng,
) -> Result<Segmentation> {
    if images.len() != scores.len() || images.len() != masks.len() {
        return Err(ClusterError::InvalidArgument(format!(
            "{} images, {} score maps, {} masks",
            images.len(),
            scores.len(),
            masks.len()
        ))
        .into());
    }
    let k = cfg.classes;
    if k == 0 || k > 255 {
        return Err(ClusterError::InvalidArgument(format!(
            "class count must lie in 1..=255, got {k}"
        ))
        .into());
    }
    let Some(first) = images.first() else {
        return Err(ClusterError::InvalidArgument("no images".into()).into());
    };
    let bank = FilterBank::default_for(first.channels());
    let features = images
        .iter()
        .map(|img| pixel_features(img, &bank))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut regions = Vec::new();
    let mut kept = Vec::new();
    for (i, (mask, s)) in masks.iter().zip(scores).enumerate() {
        let cleaned = cleanup(mask);
        for comp in connected_components(mask, i) {
            regions.push(region_descriptor(&comp, &features[i], s.scores())?);
        }
        kept.push(surviving_components(mask, &cleaned));
    }
    let blank = |m: &BinaryMask| LabelMap::uniform(m.height(), m.width(), k as u8, 0);
    if regions.is_empty() {
        return Ok(Segmentation {
            labels: kept
                .iter()
                .map(blank)
                .collect::<std::result::Result<_, _>>()?,
            regions,
            masks: kept,
            pairs: None,
            embedder: None,
            losses: Vec::new(),
        });
    }
    let descriptors: Vec<Vec<f64>> = regions.iter().map(|r| r.descriptor.clone()).collect();
    let pairs = mine_pairs(&descriptors, &cfg.mining(), &mut rng.fork(1))?;
    let trained = train_embedder(&descriptors, &pairs, &cfg.train, &mut rng.fork(2))?;
    let labels = label_pixels(&trained.embedder, &features, &kept, k, &mut rng.fork(3))?;
    Ok(Segmentation {
        labels,
        regions,
        masks: kept,
        pairs: Some(pairs),
        embedder: Some(trained.embedder),
        losses: trained.losses,
    })
}
