//! Seeded synthetic data with known ground truth, shared by tests, examples
//! and the studio's bundled demo project.

use crate::grid::{lanczos_lowpass_with, BinaryMask, Boundary, Grid, LabelMap};
use crate::rng::Rng;
use crate::threshold::AnomalyScoreMap;

/// Region descriptors in three groups: 90 near-identical "normal" ones and two
/// groups of 5 offset along their own directions.
#[derive(Clone, Debug)]
pub struct DescriptorFixture {
    pub descriptors: Vec<Vec<f64>>,
    /// 0 for normal, 1 and 2 for the two feature groups.
    pub truth: Vec<usize>,
}

pub const DESCRIPTOR_DIM: usize = 16;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn descriptor_fixture(seed: u64) -> DescriptorFixture {
    let mut rng = Rng::new(seed);
    let mut dir = || {
        (0..DESCRIPTOR_DIM)
            .map(|_| rng.normal())
            .collect::<Vec<f64>>()
    };
    let (normal, a, b) = (dir(), dir(), dir());
    let mut rng = Rng::new(seed).fork(0xd35c);
    let (mut descriptors, mut truth) = (Vec::new(), Vec::new());
    for i in 0..100 {
        let cls = match i {
            0..90 => 0,
            90..95 => 1,
            _ => 2,
        };
        let v = (0..DESCRIPTOR_DIM)
            .map(|k| {
                let offset = match cls {
                    1 => 0.5 * a[k],
                    2 => 0.5 * b[k],
                    _ => 0.0,
                };
                normal[k] + offset + 0.03 * rng.normal()
            })
            .collect();
        descriptors.push(unit(v));
        truth.push(cls);
    }
    DescriptorFixture { descriptors, truth }
}

/// Ten score maps: nine with stationary uniform noise and one that also holds
/// a high-scoring square blob.
#[derive(Clone, Debug)]
pub struct ScoreFixture {
    pub maps: Vec<AnomalyScoreMap>,
    pub truth: Vec<BinaryMask>,
}

pub fn stationary_score_fixture(seed: u64) -> ScoreFixture {
    const N: usize = 64;
    let mut rng = Rng::new(seed);
    let (mut maps, mut truth) = (Vec::new(), Vec::new());
    for i in 0..10 {
        let blob = |y: usize, x: usize| i == 9 && (20..36).contains(&y) && (24..40).contains(&x);
        let g = Grid::from_fn(N, N, 1, |y, x, _| {
            rng.uniform() + if blob(y, x) { 2.5 } else { 0.0 }
        });
        maps.push(AnomalyScoreMap::from_grid(g, format!("map-{i}")).expect("single channel"));
        truth.push(BinaryMask::from_fn(N, N, blob));
    }
    ScoreFixture { maps, truth }
}

/// Colour of the two planted feature types and of the base texture.
pub const NORMAL_TINT: [f64; 3] = [0.55, 0.5, 0.45];
pub const STAIN_TINT: [f64; 3] = [0.8, 0.25, 0.2];
pub const SPECKLE_TINT: [f64; 3] = [0.2, 0.35, 0.85];

/// Four textures sharing one stationary pattern, each with planted discs of
/// two feature types: a flat reddish stain (label 1) and a fine bluish
/// speckle (label 2).
#[derive(Clone, Debug)]
pub struct TextureFixture {
    pub images: Vec<Grid>,
    pub labels: Vec<LabelMap>,
}

pub const TEXTURE_SIZE: usize = 96;
pub const FEATURES_PER_TYPE: usize = 3;

/// The stationary background at `(y, x)`.
pub fn base_texture(y: usize, x: usize, c: usize, noise: f64) -> f64 {
    let (fy, fx) = (y as f64, x as f64);
    let pattern =
        (std::f64::consts::TAU * fx / 8.0).sin() * (std::f64::consts::TAU * fy / 8.0).sin();
    NORMAL_TINT[c] + 0.15 * pattern + noise
}

/// A stationary exemplar that tiles with period `size`: smooth tinted grain,
/// low-passed circularly so neighbouring pixels are correlated across the wrap
/// just as in the interior.
pub fn periodic_exemplar(size: usize, seed: u64) -> Grid {
    let grain = Grid::standard_normal(size, size, 3, &mut Rng::new(seed));
    let smooth = lanczos_lowpass_with(&grain, EXEMPLAR_GRAIN_CUTOFF, Boundary::Circular)
        .expect("finite noise");
    let sd = (smooth.data().iter().map(|v| v * v).sum::<f64>() / smooth.len().max(1) as f64).sqrt();
    Grid::from_fn(size, size, 3, |y, x, c| {
        NORMAL_TINT[c] + 0.1 * smooth.get(y, x, c) / sd
    })
}

const EXEMPLAR_GRAIN_CUTOFF: f64 = 0.4;

pub fn texture_fixture(seed: u64) -> TextureFixture {
    const N: usize = TEXTURE_SIZE;
    let mut rng = Rng::new(seed);
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..4 {
        let mut discs: Vec<(f64, f64, f64, u8)> = Vec::new();
        for label in [1u8, 2] {
            let mut placed = 0;
            while placed < FEATURES_PER_TYPE {
                let r = 6.0 + 3.0 * rng.uniform();
                let cy = r + 2.0 + rng.uniform() * (N as f64 - 2.0 * r - 4.0);
                let cx = r + 2.0 + rng.uniform() * (N as f64 - 2.0 * r - 4.0);
                let clear = discs.iter().all(|&(y, x, rr, _)| {
                    ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() > r + rr + 6.0
                });
                if clear {
                    discs.push((cy, cx, r, label));
                    placed += 1;
                }
            }
        }
        let label_at = |y: usize, x: usize| {
            discs
                .iter()
                .find(|&&(cy, cx, r, _)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
                .map_or(0, |d| d.3)
        };
        let img = Grid::from_fn(N, N, 3, |y, x, c| {
            let n = 0.03 * rng.normal();
            match label_at(y, x) {
                1 => STAIN_TINT[c] + n,
                2 => SPECKLE_TINT[c] + if (x + y) % 2 == 0 { 0.12 } else { -0.12 } + n,
                _ => base_texture(y, x, c, n),
            }
        });
        let lm = LabelMap::new(
            N,
            N,
            2,
            (0..N * N).map(|i| label_at(i / N, i % N)).collect(),
        )
        .expect("labels in range");
        images.push(img);
        labels.push(lm);
    }
    TextureFixture { images, labels }
}
