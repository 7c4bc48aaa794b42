use crate::grid::LabelMap;

use super::{ClusterError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelMetrics {
    pub accuracy: f64,
    pub mean_iou: f64,
    pub macro_f1: f64,
}

/// Minimum-cost perfect assignment on a square `n x n` cost matrix.
/// Returns `assign[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // Potentials-based shortest augmenting path, 1-indexed.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Confusion counts `conf[pred][truth]` over `classes` labels.
fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let mut conf = vec![vec![0.0; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        conf[p][t] += 1.0;
    }
    conf
}

/// Accuracy, IoU and F1 after the best one-to-one relabeling of `pred`.
pub fn matched_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<LabelMetrics> {
    if pred.len() != truth.len() {
        return Err(ClusterError::InvalidArgument(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(ClusterError::InvalidArgument("no labels to compare".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= classes) {
        return Err(ClusterError::InvalidArgument(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    let conf = confusion(pred, truth, classes);
    let cost: Vec<Vec<f64>> = conf
        .iter()
        .map(|row| row.iter().map(|c| -c).collect())
        .collect();
    let assign = hungarian(&cost);
    let n = pred.len() as f64;
    let correct: f64 = (0..classes).map(|p| conf[p][assign[p]]).sum();

    let mut iou_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut present = 0usize;
    for p in 0..classes {
        let t = assign[p];
        let tp = conf[p][t];
        let pred_total: f64 = conf[p].iter().sum();
        let truth_total: f64 = conf.iter().map(|row| row[t]).sum();
        if pred_total + truth_total == 0.0 {
            continue;
        }
        present += 1;
        iou_sum += tp / (pred_total + truth_total - tp);
        f1_sum += 2.0 * tp / (pred_total + truth_total);
    }
    Ok(LabelMetrics {
        accuracy: correct / n,
        mean_iou: iou_sum / present as f64,
        macro_f1: f1_sum / present as f64,
    })
}

/// Pixel accuracy, mean IoU and macro F1 of `pred` against `truth` after
/// optimal matching of predicted to ground-truth classes (background included).
pub fn evaluate_labels(pred: &[LabelMap], truth: &[LabelMap]) -> Result<LabelMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(ClusterError::InvalidArgument(format!(
            "{} predicted maps for {} ground-truth maps",
            pred.len(),
            truth.len()
        )));
    }
    let k = pred[0].num_classes();
    for (p, t) in pred.iter().zip(truth) {
        if p.num_classes() != t.num_classes() || p.num_classes() != k {
            return Err(ClusterError::ClassCountMismatch {
                predicted: p.num_classes(),
                truth: t.num_classes(),
            });
        }
        if (p.height(), p.width()) != (t.height(), t.width()) {
            return Err(ClusterError::InvalidArgument(
                "label map sizes differ".into(),
            ));
        }
    }
    let flat = |maps: &[LabelMap]| -> Vec<usize> {
        maps.iter()
            .flat_map(|m| m.labels().iter().map(|&l| l as usize))
            .collect()
    };
    matched_metrics(&flat(pred), &flat(truth), k as usize + 1)
}
