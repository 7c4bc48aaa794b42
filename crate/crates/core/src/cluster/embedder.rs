use rayon::prelude::*;

use crate::grid::{Boundary, Grid};
use crate::rng::Rng;

use super::{ClusterError, Result};

const LN_EPS: f64 = 1e-5;
const TAPS: usize = 9;

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `y = W x + b` for a row-major `out x in` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .zip(w.chunks_exact(n))
        .map(|(bi, row)| bi + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

/// `dx = W^T dy`, accumulating `dW += dy x^T` and `db += dy`.
fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        let row = &w[o * n..(o + 1) * n];
        let drow = &mut dw[o * n..(o + 1) * n];
        for i in 0..n {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

struct LnOut {
    xhat: Vec<f64>,
    inv_std: f64,
    y: Vec<f64>,
}

fn layer_norm(a: &[f64], gain: &[f64], bias: &[f64]) -> LnOut {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = a.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((x, g), b)| g * x + b)
        .collect();
    LnOut { xhat, inv_std, y }
}

fn layer_norm_backward(
    ln: &LnOut,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgain[i] += dy[i] * ln.xhat[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
    }
    let m1 = dxhat.iter().sum::<f64>() / n;
    let m2 = dxhat.iter().zip(&ln.xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(&ln.xhat)
        .map(|(d, x)| ln.inv_std * (d - m1 - x * m2))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EmbedderShape {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
}

impl EmbedderShape {
    fn offsets(&self) -> Offsets {
        let (i, h, o) = (self.in_channels, self.hidden, self.out_channels);
        let mut at = 0;
        let mut take = |n: usize| {
            let s = at;
            at += n;
            s..at
        };
        Offsets {
            w1: take(TAPS * h * i),
            b1: take(h),
            g1: take(h),
            be1: take(h),
            w2: take(TAPS * h * h),
            b2: take(h),
            g2: take(h),
            be2: take(h),
            w3: take(o * h),
            b3: take(o),
            total: at,
        }
    }

    pub fn num_params(&self) -> usize {
        self.offsets().total
    }
}

struct Offsets {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    g1: std::ops::Range<usize>,
    be1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
    g2: std::ops::Range<usize>,
    be2: std::ops::Range<usize>,
    w3: std::ops::Range<usize>,
    b3: std::ops::Range<usize>,
    total: usize,
}

/// Three-layer convolutional embedder: 3x3 conv, LayerNorm, GeLU, 3x3 conv,
/// LayerNorm, GeLU, 1x1 conv. Receptive field 5x5.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Embedder {
    pub shape: EmbedderShape,
    /// 3x3 weights are laid out `[tap][out][in]` with taps in raster order.
    pub params: Vec<f64>,
}

impl Embedder {
    pub fn random(shape: EmbedderShape, rng: &mut Rng) -> Self {
        let off = shape.offsets();
        let mut params = vec![0.0; off.total];
        let s1 = (1.0 / (TAPS * shape.in_channels) as f64).sqrt();
        let s2 = (1.0 / (TAPS * shape.hidden) as f64).sqrt();
        let s3 = (1.0 / shape.hidden as f64).sqrt();
        for (range, scale) in [
            (off.w1.clone(), s1),
            (off.w2.clone(), s2),
            (off.w3.clone(), s3),
        ] {
            for v in &mut params[range] {
                *v = scale * rng.normal();
            }
        }
        params[off.g1].fill(1.0);
        params[off.g2].fill(1.0);
        Self { shape, params }
    }

    /// Sums the 3x3 taps: the response to a spatially constant input.
    fn collapsed(&self) -> (Vec<f64>, Vec<f64>) {
        let off = self.shape.offsets();
        let collapse = |w: &[f64]| {
            let n = w.len() / TAPS;
            let mut out = vec![0.0; n];
            for tap in w.chunks_exact(n) {
                out.iter_mut().zip(tap).for_each(|(o, t)| *o += t);
            }
            out
        };
        (
            collapse(&self.params[off.w1]),
            collapse(&self.params[off.w2]),
        )
    }

    /// Embedding of a spatially constant feature field.
    pub fn embed_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.shape.in_channels {
            return Err(ClusterError::InvalidArgument(format!(
                "embedder expects {} inputs, got {}",
                self.shape.in_channels,
                x.len()
            )));
        }
        let (w1, w2) = self.collapsed();
        Ok(self.vector_forward(&w1, &w2, x).e)
    }

    fn vector_forward(&self, w1: &[f64], w2: &[f64], x: &[f64]) -> VecCache {
        let off = self.shape.offsets();
        let p = &self.params;
        let a1 = affine(w1, &p[off.b1], x);
        let ln1 = layer_norm(&a1, &p[off.g1], &p[off.be1]);
        let r1: Vec<f64> = ln1.y.iter().map(|&v| gelu(v)).collect();
        let a2 = affine(w2, &p[off.b2], &r1);
        let ln2 = layer_norm(&a2, &p[off.g2], &p[off.be2]);
        let r2: Vec<f64> = ln2.y.iter().map(|&v| gelu(v)).collect();
        let e = affine(&p[off.w3], &p[off.b3], &r2);
        VecCache {
            x: x.to_vec(),
            ln1,
            r1,
            ln2,
            r2,
            e,
        }
    }

    /// Convolutional forward over a full feature grid with reflective padding.
    pub fn embed_grid(&self, features: &Grid) -> Result<Grid> {
        let s = self.shape;
        if features.channels() != s.in_channels {
            return Err(ClusterError::InvalidArgument(format!(
                "embedder expects {} channels, got {}",
                s.in_channels,
                features.channels()
            )));
        }
        let off = s.offsets();
        let p = &self.params;
        let hidden1 = self.conv_ln_gelu(
            features,
            &p[off.w1.clone()],
            &p[off.b1.clone()],
            &p[off.g1.clone()],
            &p[off.be1.clone()],
            s.hidden,
        );
        let hidden2 = self.conv_ln_gelu(
            &hidden1,
            &p[off.w2.clone()],
            &p[off.b2.clone()],
            &p[off.g2.clone()],
            &p[off.be2.clone()],
            s.hidden,
        );
        let (h, w, _) = features.shape();
        let mut out = Grid::zeros(h, w, s.out_channels);
        out.data_mut()
            .par_chunks_exact_mut(s.out_channels)
            .zip(hidden2.data().par_chunks_exact(s.hidden))
            .for_each(|(o, r)| {
                o.copy_from_slice(&affine(&p[off.w3.clone()], &p[off.b3.clone()], r))
            });
        Ok(out)
    }

    fn conv_ln_gelu(
        &self,
        g: &Grid,
        w: &[f64],
        b: &[f64],
        gain: &[f64],
        bias: &[f64],
        out_c: usize,
    ) -> Grid {
        let (h, wd, c) = g.shape();
        let mut out = Grid::zeros(h, wd, out_c);
        out.data_mut()
            .par_chunks_exact_mut(wd * out_c)
            .enumerate()
            .for_each(|(y, row)| {
                for x in 0..wd {
                    let mut a = b.to_vec();
                    for (tap, tw) in w.chunks_exact(out_c * c).enumerate() {
                        let sy = Boundary::Reflect.fold(y as isize + (tap / 3) as isize - 1, h);
                        let sx = Boundary::Reflect.fold(x as isize + (tap % 3) as isize - 1, wd);
                        let src = g.pixel(sy, sx);
                        for (ao, wrow) in a.iter_mut().zip(tw.chunks_exact(c)) {
                            *ao += wrow.iter().zip(src).map(|(p, v)| p * v).sum::<f64>();
                        }
                    }
                    let ln = layer_norm(&a, gain, bias);
                    for (o, v) in row[x * out_c..(x + 1) * out_c].iter_mut().zip(&ln.y) {
                        *o = gelu(*v);
                    }
                }
            });
        out
    }
}

struct VecCache {
    x: Vec<f64>,
    ln1: LnOut,
    r1: Vec<f64>,
    ln2: LnOut,
    r2: Vec<f64>,
    e: Vec<f64>,
}

/// A differentiable map from region descriptors to contrastive outputs.
pub trait ContrastiveModel {
    type Cache;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward_batch(&self, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Self::Cache);
    /// Parameter gradient given the gradient of each output.
    fn backward_batch(&self, cache: &Self::Cache, grad_outputs: &[Vec<f64>]) -> Vec<f64>;
}

/// Embedder plus the two-layer projection head used only during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingNet {
    pub embedder: Embedder,
    pub head_hidden: usize,
    pub proj_dim: usize,
    /// `[W1 (hidden x out), b1, W2 (proj x hidden), b2]`
    pub head: Vec<f64>,
    flat: Vec<f64>,
}

impl TrainingNet {
    pub fn random(
        shape: EmbedderShape,
        head_hidden: usize,
        proj_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let embedder = Embedder::random(shape, rng);
        let d = shape.out_channels;
        let mut head = vec![0.0; head_hidden * d + head_hidden + proj_dim * head_hidden + proj_dim];
        let s1 = (1.0 / d as f64).sqrt();
        let s2 = (1.0 / head_hidden as f64).sqrt();
        for v in &mut head[..head_hidden * d] {
            *v = s1 * rng.normal();
        }
        let w2 = head_hidden * d + head_hidden;
        for v in &mut head[w2..w2 + proj_dim * head_hidden] {
            *v = s2 * rng.normal();
        }
        let mut net = Self {
            embedder,
            head_hidden,
            proj_dim,
            head,
            flat: Vec::new(),
        };
        net.sync_flat();
        net
    }

    fn sync_flat(&mut self) {
        self.flat.clear();
        self.flat.extend_from_slice(&self.embedder.params);
        self.flat.extend_from_slice(&self.head);
    }

    fn split_flat(&mut self) {
        let n = self.embedder.params.len();
        self.embedder.params.copy_from_slice(&self.flat[..n]);
        self.head.copy_from_slice(&self.flat[n..]);
    }

    /// Applies a parameter update made through [`ContrastiveModel::params_mut`].
    pub fn commit(&mut self) {
        self.split_flat();
    }

    pub fn into_embedder(mut self) -> Embedder {
        self.split_flat();
        self.embedder
    }

    fn head_ranges(
        &self,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let d = self.embedder.shape.out_channels;
        let (hh, pd) = (self.head_hidden, self.proj_dim);
        let a = 0..hh * d;
        let b = a.end..a.end + hh;
        let c = b.end..b.end + pd * hh;
        let e = c.end..c.end + pd;
        (a, b, c, e)
    }
}

pub struct NetCache {
    w1: Vec<f64>,
    w2: Vec<f64>,
    samples: Vec<(VecCache, Vec<f64>, Vec<f64>)>,
}

impl ContrastiveModel for TrainingNet {
    type Cache = NetCache;

    fn params(&self) -> &[f64] {
        &self.flat
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    fn forward_batch(&self, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, NetCache) {
        let mut net = self.clone();
        net.split_flat();
        let (w1, w2) = net.embedder.collapsed();
        let (hw1, hb1, hw2, hb2) = net.head_ranges();
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut samples = Vec::with_capacity(inputs.len());
        for x in inputs {
            let vc = net.embedder.vector_forward(&w1, &w2, x);
            let pre = affine(&net.head[hw1.clone()], &net.head[hb1.clone()], &vc.e);
            let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
            outputs.push(affine(&net.head[hw2.clone()], &net.head[hb2.clone()], &act));
            samples.push((vc, pre, act));
        }
        (outputs, NetCache { w1, w2, samples })
    }

    fn backward_batch(&self, cache: &NetCache, grad_outputs: &[Vec<f64>]) -> Vec<f64> {
        let n_emb = self.embedder.params.len();
        let off = self.embedder.shape.offsets();
        let emb = &self.flat[..n_emb];
        let head = &self.flat[n_emb..];
        let (hw1, hb1, hw2, hb2) = self.head_ranges();
        let mut grad = vec![0.0; self.flat.len()];
        let mut dw1 = vec![0.0; cache.w1.len()];
        let mut dw2 = vec![0.0; cache.w2.len()];
        {
            let (ge, gh) = grad.split_at_mut(n_emb);
            let (ghw1, rest) = gh.split_at_mut(hb1.start);
            let (ghb1, rest) = rest.split_at_mut(hw2.start - hb1.start);
            let (ghw2, ghb2) = rest.split_at_mut(hb2.start - hw2.start);
            for ((vc, pre, act), dz) in cache.samples.iter().zip(grad_outputs) {
                if dz.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let dact = affine_backward(&head[hw2.clone()], act, dz, ghw2, ghb2);
                let dpre: Vec<f64> = dact
                    .iter()
                    .zip(pre)
                    .map(|(d, p)| d * gelu_grad(*p))
                    .collect();
                let de = affine_backward(&head[hw1.clone()], &vc.e, &dpre, ghw1, ghb1);

                let (gw3, gb3) = split_pair(ge, &off.w3, &off.b3);
                let dr2 = affine_backward(&emb[off.w3.clone()], &vc.r2, &de, gw3, gb3);
                let dy2: Vec<f64> = dr2
                    .iter()
                    .zip(&vc.ln2.y)
                    .map(|(d, y)| d * gelu_grad(*y))
                    .collect();
                let (gg2, gbe2) = split_pair(ge, &off.g2, &off.be2);
                let da2 = layer_norm_backward(&vc.ln2, &emb[off.g2.clone()], &dy2, gg2, gbe2);
                let dr1 =
                    affine_backward(&cache.w2, &vc.r1, &da2, &mut dw2, &mut ge[off.b2.clone()]);
                let dy1: Vec<f64> = dr1
                    .iter()
                    .zip(&vc.ln1.y)
                    .map(|(d, y)| d * gelu_grad(*y))
                    .collect();
                let (gg1, gbe1) = split_pair(ge, &off.g1, &off.be1);
                let da1 = layer_norm_backward(&vc.ln1, &emb[off.g1.clone()], &dy1, gg1, gbe1);
                affine_backward(&cache.w1, &vc.x, &da1, &mut dw1, &mut ge[off.b1.clone()]);
            }
            // Every tap sees the same constant input, so each receives the collapsed gradient.
            for tap in ge[off.w1.clone()].chunks_exact_mut(dw1.len()) {
                tap.copy_from_slice(&dw1);
            }
            for tap in ge[off.w2.clone()].chunks_exact_mut(dw2.len()) {
                tap.copy_from_slice(&dw2);
            }
        }
        grad
    }
}

/// Two disjoint, adjacent mutable sub-slices (`a` immediately precedes `b`).
fn split_pair<'a>(
    v: &'a mut [f64],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(a.end, b.start);
    let (left, right) = v[a.start..b.end].split_at_mut(a.len());
    (left, right)
}

/// A linear map `y = W x` used to check gradients on a tiny parameter count.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub outputs: usize,
    pub inputs: usize,
    pub weights: Vec<f64>,
}

impl LinearProbe {
    pub fn random(outputs: usize, inputs: usize, rng: &mut Rng) -> Self {
        Self {
            outputs,
            inputs,
            weights: (0..outputs * inputs).map(|_| rng.normal()).collect(),
        }
    }
}

impl ContrastiveModel for LinearProbe {
    type Cache = Vec<Vec<f64>>;

    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn forward_batch(&self, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let zero = vec![0.0; self.outputs];
        let out = inputs
            .iter()
            .map(|x| affine(&self.weights, &zero, x))
            .collect();
        (out, inputs.to_vec())
    }

    fn backward_batch(&self, cache: &Vec<Vec<f64>>, grad_outputs: &[Vec<f64>]) -> Vec<f64> {
        let mut g = vec![0.0; self.weights.len()];
        let mut db = vec![0.0; self.outputs];
        for (x, dy) in cache.iter().zip(grad_outputs) {
            affine_backward(&self.weights, x, dy, &mut g, &mut db);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> EmbedderShape {
        EmbedderShape {
            in_channels: 4,
            hidden: 6,
            out_channels: 3,
        }
    }

    #[test]
    fn constant_grid_matches_vector_path() {
        let mut rng = Rng::new(2);
        let e = Embedder::random(shape(), &mut rng);
        let x = [0.3, -1.2, 0.5, 2.0];
        let g = Grid::from_fn(5, 6, 4, |_, _, c| x[c]);
        let out = e.embed_grid(&g).unwrap();
        let v = e.embed_vector(&x).unwrap();
        for px in out.data().chunks_exact(3) {
            for (a, b) in px.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn receptive_field_is_five_by_five() {
        let mut rng = Rng::new(3);
        let e = Embedder::random(shape(), &mut rng);
        let base = Grid::standard_normal(11, 11, 4, &mut rng);
        let ref_out = e.embed_grid(&base).unwrap();
        let mut far = base.clone();
        far.set(5, 8, 0, 10.0); // three pixels right of centre
        let mut near = base.clone();
        near.set(5, 7, 0, 10.0); // two pixels right of centre
        let a = e.embed_grid(&far).unwrap();
        let b = e.embed_grid(&near).unwrap();
        assert_eq!(a.pixel(5, 5), ref_out.pixel(5, 5));
        assert_ne!(b.pixel(5, 5), ref_out.pixel(5, 5));
    }

    #[test]
    fn forward_is_deterministic() {
        let e = Embedder::random(shape(), &mut Rng::new(1));
        let g = Grid::standard_normal(6, 6, 4, &mut Rng::new(5));
        assert_eq!(e.embed_grid(&g).unwrap(), e.embed_grid(&g).unwrap());
    }

    #[test]
    fn parameter_count() {
        let s = shape();
        assert_eq!(
            s.num_params(),
            9 * 6 * 4 + 3 * 6 + 9 * 6 * 6 + 3 * 6 + 3 * 6 + 3
        );
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
