use std::collections::BTreeSet;

use crate::rng::Rng;

use super::kmeans::{kmeans, KMeansConfig};
use super::{ClusterError, Result};

pub const DEFAULT_POSITIVES: usize = 10;
pub const DEFAULT_DISCARD_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Round-robin across preclusters.
    #[default]
    Stratified,
    /// Uniform draw from every non-positive region (ablation baseline).
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMiningConfig {
    pub positives: usize,
    pub preclusters: usize,
    pub discard_fraction: f64,
    pub sampling: NegativeSampling,
}

impl PairMiningConfig {
    pub fn new(preclusters: usize) -> Self {
        Self {
            positives: DEFAULT_POSITIVES,
            preclusters,
            discard_fraction: DEFAULT_DISCARD_FRACTION,
            sampling: NegativeSampling::Stratified,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionPairSet {
    pub num_regions: usize,
    /// Unordered positive pairs stored as `(lo, hi)`; each is used from both ends.
    pub positives: Vec<(usize, usize)>,
    /// Directed `(anchor, negative)` pairs.
    pub negatives: Vec<(usize, usize)>,
    pub precluster: Vec<usize>,
    /// Negatives requested per anchor.
    pub negatives_per_anchor: usize,
    /// Set when fewer regions than `p + 1` forced `p` down.
    pub clamped_positives: Option<usize>,
}

impl RegionPairSet {
    /// Negatives of each anchor.
    pub fn negatives_by_anchor(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_regions];
        for &(a, n) in &self.negatives {
            out[a].push(n);
        }
        out
    }

    /// Share of negative draws that land in precluster `c`.
    pub fn negative_share(&self, c: usize) -> f64 {
        if self.negatives.is_empty() {
            return 0.0;
        }
        let hits = self
            .negatives
            .iter()
            .filter(|&&(_, n)| self.precluster[n] == c)
            .count();
        hits as f64 / self.negatives.len() as f64
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-300)
}

/// Other regions ordered from nearest to farthest (ties by index).
fn neighbour_order(descriptors: &[Vec<f64>], a: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = (0..descriptors.len())
        .filter(|&b| b != a)
        .map(|b| (cosine_distance(&descriptors[a], &descriptors[b]), b))
        .collect();
    others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    others.into_iter().map(|(_, b)| b).collect()
}

/// Mines positive pairs (nearest neighbours) and negative pairs for contrastive
/// training.
///
/// Negatives skip the anchor's closest share of neighbours, then
/// `n` are drawn per anchor where `n` is the expected number of groups, taken as the
/// total number of regions minus the size of the largest precluster. Stratified
/// sampling visits the preclusters round-robin in a random order per anchor.
pub fn mine_pairs(
    descriptors: &[Vec<f64>],
    cfg: &PairMiningConfig,
    rng: &mut Rng,
) -> Result<RegionPairSet> {
    let m = descriptors.len();
    if m < 2 {
        return Err(ClusterError::TooFewRegions(m));
    }
    let dim = descriptors[0].len();
    if dim == 0 || descriptors.iter().any(|d| d.len() != dim) {
        return Err(ClusterError::InvalidArgument(
            "descriptors must share a non-zero length".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.discard_fraction) {
        return Err(ClusterError::InvalidArgument(format!(
            "discard fraction must lie in [0, 1), got {}",
            cfg.discard_fraction
        )));
    }
    let p = cfg.positives.min(m - 1);
    let clamped_positives = (p < cfg.positives).then_some(p);

    let order: Vec<Vec<usize>> = (0..m).map(|a| neighbour_order(descriptors, a)).collect();
    let discard = ((m - 1) as f64 * cfg.discard_fraction).floor() as usize;
    let mut close = vec![vec![false; m]; m];
    for a in 0..m {
        for &b in &order[a][..discard] {
            close[a][b] = true;
        }
    }

    let mut positive_set = BTreeSet::new();
    let mut is_positive = vec![vec![false; m]; m];
    for a in 0..m {
        for &b in &order[a][..p] {
            positive_set.insert((a.min(b), a.max(b)));
            is_positive[a][b] = true;
            is_positive[b][a] = true;
        }
    }

    let k_pre = cfg.preclusters.clamp(1, m);
    let flat: Vec<f64> = descriptors.iter().flatten().copied().collect();
    let pre = kmeans(&flat, dim, k_pre, KMeansConfig::default(), rng)?;
    let precluster = pre.assignments;
    let largest = pre_sizes(&precluster, k_pre).into_iter().max().unwrap_or(0);
    let n = m - largest;

    let mut negatives = Vec::new();
    for a in 0..m {
        match cfg.sampling {
            NegativeSampling::Stratified => {
                let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k_pre];
                for b in 0..m {
                    if b != a && !is_positive[a][b] && !close[a][b] {
                        buckets[precluster[b]].push(b);
                    }
                }
                for bucket in &mut buckets {
                    rng.shuffle(bucket);
                }
                let mut visit: Vec<usize> = (0..k_pre).collect();
                rng.shuffle(&mut visit);
                let mut cursor = vec![0usize; k_pre];
                let mut taken = 0;
                while taken < n {
                    let mut progressed = false;
                    for &c in &visit {
                        if taken == n {
                            break;
                        }
                        if let Some(&b) = buckets[c].get(cursor[c]) {
                            cursor[c] += 1;
                            negatives.push((a, b));
                            taken += 1;
                            progressed = true;
                        }
                    }
                    if !progressed {
                        break;
                    }
                }
            }
            NegativeSampling::Uniform => {
                let mut pool: Vec<usize> =
                    (0..m).filter(|&b| b != a && !is_positive[a][b]).collect();
                rng.shuffle(&mut pool);
                negatives.extend(pool.into_iter().take(n).map(|b| (a, b)));
            }
        }
    }

    Ok(RegionPairSet {
        num_regions: m,
        positives: positive_set.into_iter().collect(),
        negatives,
        precluster,
        negatives_per_anchor: n,
        clamped_positives,
    })
}

fn pre_sizes(assign: &[usize], k: usize) -> Vec<usize> {
    let mut s = vec![0; k];
    for &a in assign {
        s[a] += 1;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_regions_one_positive() {
        let d = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut cfg = PairMiningConfig::new(2);
        cfg.positives = 1;
        let set = mine_pairs(&d, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(set.positives, vec![(0, 1)]);
        assert!(set.negatives.len() <= 1);
        assert!(set.negatives.iter().all(|&(a, b)| a != b));
    }

    #[test]
    fn positives_are_clamped() {
        let d = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let set = mine_pairs(&d, &PairMiningConfig::new(2), &mut Rng::new(0)).unwrap();
        assert_eq!(set.clamped_positives, Some(2));
        assert_eq!(set.positives.len(), 3);
    }

    #[test]
    fn single_region_is_rejected() {
        assert!(matches!(
            mine_pairs(&[vec![1.0]], &PairMiningConfig::new(1), &mut Rng::new(0)),
            Err(ClusterError::TooFewRegions(1))
        ));
    }
}
