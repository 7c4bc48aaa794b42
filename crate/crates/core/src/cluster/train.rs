use crate::rng::Rng;

use super::embedder::{ContrastiveModel, Embedder, EmbedderShape, TrainingNet};
use super::pairs::RegionPairSet;
use super::{ClusterError, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub tau: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub proj_dim: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 0.01,
            tau: 0.07,
            hidden: 32,
            embed_dim: 16,
            head_hidden: 32,
            proj_dim: 16,
            checkpoint_every: 50,
        }
    }
}

/// Stable `log(sum(exp(l)))`, summed in sorted order so the result does not
/// depend on the order of `logits`.
fn log_sum_exp(logits: &mut [f64]) -> f64 {
    logits.sort_by(f64::total_cmp);
    let m = logits[logits.len() - 1];
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// InfoNCE for one anchor: `-log(e^{s+/tau} / (e^{s+/tau} + sum e^{s-/tau}))`.
pub fn info_nce(positive_sim: f64, negative_sims: &[f64], tau: f64) -> f64 {
    if negative_sims.is_empty() {
        return 0.0;
    }
    let lp = positive_sim / tau;
    let mut logits: Vec<f64> = std::iter::once(lp)
        .chain(negative_sims.iter().map(|s| s / tau))
        .collect();
    log_sum_exp(&mut logits) - lp
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Mean InfoNCE over every positive pair, taken from both ends, and the
/// gradient with respect to each output vector.
pub fn contrastive_loss(
    outputs: &[Vec<f64>],
    pairs: &RegionPairSet,
    tau: f64,
) -> (f64, Vec<Vec<f64>>) {
    let negs = pairs.negatives_by_anchor();
    let norms: Vec<f64> = outputs
        .iter()
        .map(|o| dot(o, o).sqrt().max(1e-150))
        .collect();
    let units: Vec<Vec<f64>> = outputs
        .iter()
        .zip(&norms)
        .map(|(o, n)| o.iter().map(|v| v / n).collect())
        .collect();
    // Gradients with respect to the unit vectors, projected back at the end.
    let mut gu: Vec<Vec<f64>> = outputs.iter().map(|o| vec![0.0; o.len()]).collect();
    let mut anchors: Vec<Vec<usize>> = vec![Vec::new(); outputs.len()];
    for &(i, j) in &pairs.positives {
        anchors[i].push(j);
        anchors[j].push(i);
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    let mut neg_logits = Vec::new();
    for (a, positives) in anchors.iter().enumerate() {
        terms += positives.len();
        let neg = &negs[a];
        if neg.is_empty() || positives.is_empty() {
            continue;
        }
        neg_logits.clear();
        neg_logits.extend(neg.iter().map(|&n| dot(&units[a], &units[n]) / tau));
        // Sorted summation keeps the result independent of negative order.
        let mut sorted = neg_logits.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted[sorted.len() - 1];
        let neg_sum: f64 = sorted.iter().map(|l| (l - m).exp()).sum();
        // Sum over this anchor's positives of exp(m - lse).
        let mut neg_weight = 0.0;
        for &p in positives {
            let lp = dot(&units[a], &units[p]) / tau;
            let top = lp.max(m);
            let lse = top + ((lp - top).exp() + neg_sum * (m - top).exp()).ln();
            total += lse - lp;
            // dL/ds = (softmax - onehot) / tau
            add_dot_grad(&mut gu, &units, a, p, ((lp - lse).exp() - 1.0) / tau);
            neg_weight += (m - lse).exp();
        }
        for (&n, &ln) in neg.iter().zip(&neg_logits) {
            add_dot_grad(&mut gu, &units, a, n, (ln - m).exp() * neg_weight / tau);
        }
    }
    if terms == 0 {
        return (0.0, gu);
    }
    let inv = 1.0 / terms as f64;
    let grads = gu
        .iter()
        .zip(&units)
        .zip(&norms)
        .map(|((g, u), n)| {
            let radial = dot(g, u);
            g.iter()
                .zip(u)
                .map(|(gi, ui)| inv * (gi - radial * ui) / n)
                .collect()
        })
        .collect();
    (total * inv, grads)
}

/// Accumulates `w * d(u_a . u_b)` into both unit-vector gradients.
fn add_dot_grad(gu: &mut [Vec<f64>], units: &[Vec<f64>], a: usize, b: usize, w: f64) {
    for k in 0..units[a].len() {
        gu[a][k] += w * units[b][k];
        gu[b][k] += w * units[a][k];
    }
}

/// Loss and parameter gradient of `model` on the mined pairs.
pub fn loss_and_grad<M: ContrastiveModel>(
    model: &M,
    inputs: &[Vec<f64>],
    pairs: &RegionPairSet,
    tau: f64,
) -> (f64, Vec<f64>) {
    let (outputs, cache) = model.forward_batch(inputs);
    let (loss, dout) = contrastive_loss(&outputs, pairs, tau);
    (loss, model.backward_batch(&cache, &dout))
}

/// Largest relative error between the analytic gradient and central differences.
pub fn gradient_check<M: ContrastiveModel + Clone>(
    model: &M,
    inputs: &[Vec<f64>],
    pairs: &RegionPairSet,
    tau: f64,
    step: f64,
) -> f64 {
    let (_, analytic) = loss_and_grad(model, inputs, pairs, tau);
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        plus.params_mut()[i] += step;
        let mut minus = model.clone();
        minus.params_mut()[i] -= step;
        let (lp, _) = loss_and_grad(&plus, inputs, pairs, tau);
        let (lm, _) = loss_and_grad(&minus, inputs, pairs, tau);
        let fd = (lp - lm) / (2.0 * step);
        let denom = g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((g - fd).abs() / denom);
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedEmbedder {
    pub embedder: Embedder,
    pub losses: Vec<f64>,
}

/// Trains the embedder and projection head on region descriptors with SGD and a
/// cosine-decayed learning rate; returns the embedder without its head.
pub fn train_embedder(
    descriptors: &[Vec<f64>],
    pairs: &RegionPairSet,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainedEmbedder> {
    if pairs.positives.is_empty() || pairs.negatives.is_empty() {
        return Err(ClusterError::NoPairs {
            positives: pairs.positives.len(),
            negatives: pairs.negatives.len(),
        });
    }
    if descriptors.len() != pairs.num_regions {
        return Err(ClusterError::InvalidArgument(format!(
            "{} descriptors for {} mined regions",
            descriptors.len(),
            pairs.num_regions
        )));
    }
    if !(cfg.tau > 0.0) || !(cfg.lr > 0.0) {
        return Err(ClusterError::InvalidArgument(
            "tau and lr must be positive".into(),
        ));
    }
    let shape = EmbedderShape {
        in_channels: descriptors[0].len(),
        hidden: cfg.hidden,
        out_channels: cfg.embed_dim,
    };
    let mut net = TrainingNet::random(shape, cfg.head_hidden, cfg.proj_dim, rng);
    let mut checkpoint = net.clone().into_embedder();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (loss, grad) = loss_and_grad(&net, descriptors, pairs, cfg.tau);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ClusterError::Diverged {
                iteration: it,
                checkpoint: Box::new(checkpoint),
            });
        }
        losses.push(loss);
        if it % cfg.checkpoint_every.max(1) == 0 {
            checkpoint = net.clone().into_embedder();
        }
        let lr =
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos());
        for (p, g) in net.params_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        net.commit();
    }
    Ok(TrainedEmbedder {
        embedder: net.into_embedder(),
        losses,
    })
}
