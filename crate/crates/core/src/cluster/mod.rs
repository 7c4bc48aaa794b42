//! Feature-type clustering: binary masks to per-pixel semantic labels.
//!
//! Connected regions of the anomaly masks get softmax-weighted descriptors,
//! region pairs are mined for contrastive training, a small convolutional
//! embedder is trained with InfoNCE, and k-means over the embedded masked
//! pixels yields the labels.

mod components;
mod embedder;
mod kmeans;
mod metrics;
mod pairs;
mod train;

pub use components::{
    cleanup, connected_components, erode_2x2, label_components, region_descriptor, size_filter,
    Component, Region, MIN_REGION_PIXELS,
};
pub use embedder::{ContrastiveModel, Embedder, EmbedderShape, LinearProbe, TrainingNet};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use metrics::{evaluate_labels, hungarian, matched_metrics, LabelMetrics};
pub use pairs::{
    mine_pairs, NegativeSampling, PairMiningConfig, RegionPairSet, DEFAULT_DISCARD_FRACTION,
    DEFAULT_POSITIVES,
};
pub use train::{
    contrastive_loss, gradient_check, info_nce, loss_and_grad, train_embedder, TrainConfig,
    TrainedEmbedder,
};

use crate::features::normalize_pixels;
use crate::grid::{BinaryMask, Grid, GridError, LabelMap};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("region has no pixels")]
    EmptyRegion,
    #[error("region descriptor has zero norm")]
    DegenerateDescriptor,
    #[error("need at least 2 regions for pair mining, got {0}")]
    TooFewRegions(usize),
    #[error("cannot form {clusters} clusters from {points} points")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("training needs positive and negative pairs (got {positives} and {negatives})")]
    NoPairs { positives: usize, negatives: usize },
    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        checkpoint: Box<Embedder>,
    },
    #[error("predicted maps have {predicted} classes, ground truth has {truth}")]
    ClassCountMismatch { predicted: u8, truth: u8 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

/// k-means over the unit-normalized embeddings of masked pixels; writes labels
/// `1..=k` inside the masks and 0 elsewhere.
pub fn cluster_embeddings(
    embeddings: &[Grid],
    masks: &[BinaryMask],
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<LabelMap>> {
    if embeddings.len() != masks.len() {
        return Err(ClusterError::InvalidArgument(format!(
            "{} embedding grids for {} masks",
            embeddings.len(),
            masks.len()
        )));
    }
    if k == 0 || k > 255 {
        return Err(ClusterError::InvalidArgument(format!(
            "cluster count must lie in 1..=255, got {k}"
        )));
    }
    let dim = embeddings.first().map(Grid::channels).unwrap_or(0);
    let mut points = Vec::new();
    for (e, m) in embeddings.iter().zip(masks) {
        if (e.height(), e.width()) != (m.height(), m.width()) || e.channels() != dim {
            return Err(ClusterError::InvalidArgument(
                "embedding and mask shapes differ".into(),
            ));
        }
        let unit = normalize_pixels(e);
        for (i, px) in unit.data().chunks_exact(dim).enumerate() {
            if m.bits()[i] {
                points.extend_from_slice(px);
            }
        }
    }
    let mut out: Vec<LabelMap> = masks
        .iter()
        .map(|m| LabelMap::uniform(m.height(), m.width(), k as u8, 0))
        .collect::<std::result::Result<_, _>>()?;
    let total = points.len() / dim.max(1);
    if total == 0 {
        return Ok(out);
    }
    let res = kmeans(&points, dim, k, KMeansConfig::default(), rng)?;
    let mut next = res.assignments.iter();
    for (labels, m) in out.iter_mut().zip(masks) {
        for (i, _) in m.bits().iter().enumerate().filter(|(_, b)| **b) {
            let l = *next.next().expect("assignment per masked pixel") as u8 + 1;
            labels.set(i / m.width(), i % m.width(), l)?;
        }
    }
    Ok(out)
}

/// Embeds every feature grid and clusters the masked pixels into `k` classes.
pub fn label_pixels(
    embedder: &Embedder,
    features: &[Grid],
    masks: &[BinaryMask],
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<LabelMap>> {
    let embedded = features
        .iter()
        .map(|f| embedder.embed_grid(f))
        .collect::<Result<Vec<_>>>()?;
    cluster_embeddings(&embedded, masks, k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_clouds_recover_partition() {
        let mut rng = Rng::new(21);
        let centres = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let truth_ids: Vec<usize> = (0..64).map(|i| (i / 8 + i % 3) % 3).collect();
        let grid = Grid::from_fn(8, 8, 3, |y, x, c| {
            centres[truth_ids[y * 8 + x]][c] + 0.01 * (((y * 8 + x) * 7 + c) % 5) as f64
        });
        let mask = BinaryMask::from_fn(8, 8, |y, x| (y + x) % 4 != 0);
        let labels = cluster_embeddings(&[grid], std::slice::from_ref(&mask), 3, &mut rng).unwrap();
        let mut truth = LabelMap::uniform(8, 8, 3, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if mask.get(y, x) {
                    truth.set(y, x, truth_ids[y * 8 + x] as u8 + 1).unwrap();
                }
            }
        }
        let m = evaluate_labels(&labels, &[truth]).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn empty_masks_give_zero_labels() {
        let g = Grid::filled(4, 4, 2, 1.0);
        let out =
            cluster_embeddings(&[g], &[BinaryMask::empty(4, 4)], 2, &mut Rng::new(0)).unwrap();
        assert!(out[0].labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn single_class_labels_every_masked_pixel_one() {
        let g = Grid::standard_normal(5, 5, 2, &mut Rng::new(1));
        let m = BinaryMask::from_fn(5, 5, |y, _| y > 1);
        let out = cluster_embeddings(&[g], std::slice::from_ref(&m), 1, &mut Rng::new(0)).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(out[0].get(y, x), u8::from(m.get(y, x)));
            }
        }
    }

    #[test]
    fn fewer_pixels_than_clusters() {
        let g = Grid::standard_normal(3, 3, 2, &mut Rng::new(1));
        let m = BinaryMask::from_fn(3, 3, |y, x| y == 0 && x == 0);
        assert!(matches!(
            cluster_embeddings(&[g], &[m], 2, &mut Rng::new(0)),
            Err(ClusterError::TooFewPoints { .. })
        ));
    }
}
