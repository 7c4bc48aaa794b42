use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::grid::{Boundary, Grid, LabelMap};
use crate::rng::Rng;

use super::{check_cond, Denoiser, DiffusionError, Result};

/// Exact direction for data distributed as `N(mean, std^2)` per channel:
/// `eps = sigma (z - mean) / (std^2 + sigma^2)`. Ignores the condition.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAnalytic {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianAnalytic {
    pub fn new(mean: Vec<f64>, std: f64) -> Self {
        Self { mean, std }
    }

    /// Closed-form probability-flow solution from `sigma0` to 0.
    pub fn exact_solution(&self, z: &Grid, sigma0: f64) -> Grid {
        let k = self.std / (self.std * self.std + sigma0 * sigma0).sqrt();
        let c = z.channels();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let m = self.mean[i % c];
            *v = m + (*v - m) * k;
        }
        out
    }
}

impl Denoiser for GaussianAnalytic {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        check_cond(z, cond)?;
        if self.mean.len() != z.channels() {
            return Err(DiffusionError::InvalidArgument(format!(
                "mean has {} channels, state has {}",
                self.mean.len(),
                z.channels()
            )));
        }
        let c = z.channels();
        let denom = self.std * self.std + sigma * sigma;
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = sigma * (*v - self.mean[i % c]) / denom;
        }
        Ok(out)
    }
}

/// Per-pixel independent mixture: label `l` selects `N(means[l], std^2)`;
/// without a condition the posterior mixes all components by their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>, std: f64) -> Self {
        let n = means.len();
        Self {
            means,
            weights: vec![1.0 / n as f64; n],
            std,
        }
    }

    fn denoised_pixel(&self, z: &[f64], label: Option<u8>, sigma: f64) -> Result<Vec<f64>> {
        let s2 = self.std * self.std;
        let shrink = s2 / (s2 + sigma * sigma);
        let post = |mu: &[f64]| -> Vec<f64> {
            z.iter()
                .zip(mu)
                .map(|(v, m)| m + shrink * (v - m))
                .collect()
        };
        match label {
            Some(l) => {
                let mu = self
                    .means
                    .get(l as usize)
                    .ok_or(DiffusionError::LabelUnsupported(l))?;
                Ok(post(mu))
            }
            None => {
                let var = s2 + sigma * sigma;
                let logw: Vec<f64> = self
                    .means
                    .iter()
                    .zip(&self.weights)
                    .map(|(mu, w)| {
                        w.ln()
                            - z.iter()
                                .zip(mu)
                                .map(|(v, m)| (v - m) * (v - m))
                                .sum::<f64>()
                                / (2.0 * var)
                    })
                    .collect();
                let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let r: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
                let total: f64 = r.iter().sum();
                let mut d = vec![0.0; z.len()];
                for (mu, ri) in self.means.iter().zip(&r) {
                    for (di, pi) in d.iter_mut().zip(post(mu)) {
                        *di += ri / total * pi;
                    }
                }
                Ok(d)
            }
        }
    }
}

impl Denoiser for GaussianMixture {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        check_cond(z, cond)?;
        let c = z.channels();
        if self.means.iter().any(|m| m.len() != c) {
            return Err(DiffusionError::InvalidArgument(
                "mixture means must match the channel count".into(),
            ));
        }
        let mut out = Grid::zeros(z.height(), z.width(), c);
        if sigma == 0.0 {
            return Ok(out);
        }
        let w = z.width();
        for (i, px) in z.data().chunks_exact(c).enumerate() {
            let label = cond.map(|m| m.labels()[i]);
            let d = self.denoised_pixel(px, label, sigma)?;
            for (k, (v, dv)) in px.iter().zip(d).enumerate() {
                out.set(i / w, i % w, k, (v - dv) / sigma);
            }
        }
        Ok(out)
    }
}

/// `eps = z / sigma`: every step contracts the state toward 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Echo;

impl Denoiser for Echo {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        check_cond(z, cond)?;
        if sigma == 0.0 {
            return Ok(Grid::zeros(z.height(), z.width(), z.channels()));
        }
        Ok(z.map(|v| v / sigma))
    }
}

/// Wraps a denoiser and counts evaluations and evaluated pixels.
#[derive(Debug, Default)]
pub struct Counting<D> {
    pub inner: D,
    calls: AtomicUsize,
    pixels: AtomicUsize,
    max_area: AtomicUsize,
}

impl<D> Counting<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            pixels: AtomicUsize::new(0),
            max_area: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn pixels(&self) -> usize {
        self.pixels.load(Ordering::SeqCst)
    }

    /// Largest `height * width` seen in a single evaluation.
    pub fn max_area(&self) -> usize {
        self.max_area.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.pixels.store(0, Ordering::SeqCst);
        self.max_area.store(0, Ordering::SeqCst);
    }
}

impl<D: Denoiser> Denoiser for Counting<D> {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        let area = z.height() * z.width();
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.pixels.fetch_add(area, Ordering::SeqCst);
        self.max_area.fetch_max(area, Ordering::SeqCst);
        self.inner.eval(z, cond, sigma)
    }
}

pub const DEFAULT_EXEMPLAR_PATCH: usize = 3;
pub const DEFAULT_EXEMPLAR_BANDWIDTH: f64 = 1.0;
pub const DEFAULT_PATCHES_PER_LABEL: usize = 512;

/// Relative weights below `exp(-40)` are dropped.
const NEGLIGIBLE_LOG_WEIGHT: f64 = -40.0;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExemplarConfig {
    pub patch: usize,
    pub bandwidth: f64,
    pub max_patches_per_label: usize,
    pub seed: u64,
}

impl Default for ExemplarConfig {
    fn default() -> Self {
        Self {
            patch: DEFAULT_EXEMPLAR_PATCH,
            bandwidth: DEFAULT_EXEMPLAR_BANDWIDTH,
            max_patches_per_label: DEFAULT_PATCHES_PER_LABEL,
            seed: 0,
        }
    }
}

/// Patch bank for one label: flattened patches and their centre pixels.
#[derive(Clone, Debug, Default, PartialEq)]
struct PatchBank {
    patches: Vec<f64>,
    /// Squared norm of each patch.
    norms: Vec<f64>,
    centres: Vec<f64>,
}

impl PatchBank {
    fn len(&self, dim: usize) -> usize {
        self.patches.len() / dim
    }
}

/// Label-conditioned nonparametric denoiser.
///
/// The clean estimate at each pixel is a Gaussian-weighted average (bandwidth
/// `bandwidth * sigma`) of exemplar patch centres whose centre label matches the
/// condition at that pixel; without a condition every label's patches compete.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarPatch {
    cfg: ExemplarConfig,
    channels: usize,
    banks: BTreeMap<u8, PatchBank>,
}

fn gather_patch(g: &Grid, y: usize, x: usize, patch: usize, out: &mut Vec<f64>) {
    let r = (patch / 2) as isize;
    for dy in -r..=r {
        let sy = Boundary::Reflect.fold(y as isize + dy, g.height());
        for dx in -r..=r {
            let sx = Boundary::Reflect.fold(x as isize + dx, g.width());
            out.extend_from_slice(g.pixel(sy, sx));
        }
    }
}

impl ExemplarPatch {
    pub fn new(exemplars: &[(Grid, LabelMap)], cfg: ExemplarConfig) -> Result<Self> {
        if exemplars.is_empty() {
            return Err(DiffusionError::InvalidArgument(
                "exemplar set is empty".into(),
            ));
        }
        if cfg.patch.is_multiple_of(2) || cfg.patch == 0 {
            return Err(DiffusionError::InvalidArgument(format!(
                "patch size must be odd, got {}",
                cfg.patch
            )));
        }
        if !(cfg.bandwidth > 0.0) {
            return Err(DiffusionError::InvalidArgument(
                "bandwidth must be positive".into(),
            ));
        }
        let channels = exemplars[0].0.channels();
        let mut sites: BTreeMap<u8, Vec<(usize, usize, usize)>> = BTreeMap::new();
        for (e, (img, labels)) in exemplars.iter().enumerate() {
            if img.channels() != channels {
                return Err(DiffusionError::InvalidArgument(
                    "exemplars differ in channel count".into(),
                ));
            }
            if (img.height(), img.width()) != (labels.height(), labels.width()) {
                return Err(DiffusionError::InvalidArgument(
                    "exemplar and label map sizes differ".into(),
                ));
            }
            for y in 0..img.height() {
                for x in 0..img.width() {
                    sites.entry(labels.get(y, x)).or_default().push((e, y, x));
                }
            }
        }
        let mut rng = Rng::new(cfg.seed);
        let mut banks = BTreeMap::new();
        for (label, mut list) in sites {
            if list.len() > cfg.max_patches_per_label {
                rng.shuffle(&mut list);
                list.truncate(cfg.max_patches_per_label);
                list.sort_unstable();
            }
            let mut bank = PatchBank::default();
            for (e, y, x) in list {
                let img = &exemplars[e].0;
                gather_patch(img, y, x, cfg.patch, &mut bank.patches);
                bank.centres.extend_from_slice(img.pixel(y, x));
            }
            bank.norms = bank
                .patches
                .chunks_exact(cfg.patch * cfg.patch * channels)
                .map(|p| p.iter().map(|v| v * v).sum())
                .collect();
            banks.insert(label, bank);
        }
        Ok(Self {
            cfg,
            channels,
            banks,
        })
    }

    pub fn labels(&self) -> Vec<u8> {
        self.banks.keys().copied().collect()
    }

    fn dim(&self) -> usize {
        self.cfg.patch * self.cfg.patch * self.channels
    }

    /// Posterior-mean estimate `D(z; sigma)`.
    pub fn denoise(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        check_cond(z, cond)?;
        if z.channels() != self.channels {
            return Err(DiffusionError::InvalidArgument(format!(
                "exemplars have {} channels, state has {}",
                self.channels,
                z.channels()
            )));
        }
        if let Some(c) = cond {
            for (l, &n) in c.histogram().iter().enumerate() {
                if n > 0 && !self.banks.contains_key(&(l as u8)) {
                    return Err(DiffusionError::LabelUnsupported(l as u8));
                }
            }
        }
        if sigma == 0.0 {
            return Ok(z.clone());
        }
        let dim = self.dim();
        let c = self.channels;
        let h = self.cfg.bandwidth * sigma;
        let inv = 1.0 / (2.0 * h * h);
        let all: Vec<&PatchBank> = self.banks.values().collect();
        let (height, width) = (z.height(), z.width());
        let mut out = Grid::zeros(height, width, c);
        out.data_mut()
            .par_chunks_exact_mut(width * c)
            .enumerate()
            .for_each(|(y, row)| {
                let mut q = Vec::with_capacity(dim);
                let mut logw = Vec::new();
                for x in 0..width {
                    q.clear();
                    gather_patch(z, y, x, self.cfg.patch, &mut q);
                    let banks: Vec<&PatchBank> = match cond {
                        Some(m) => vec![&self.banks[&m.get(y, x)]],
                        None => all.clone(),
                    };
                    // |q|^2 is common to every patch and cancels in the normalization.
                    logw.clear();
                    for bank in &banks {
                        for (p, n2) in bank.patches.chunks_exact(dim).zip(&bank.norms) {
                            let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
                            logw.push((2.0 * dot - n2) * inv);
                        }
                    }
                    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let px = &mut row[x * c..(x + 1) * c];
                    let mut total = 0.0;
                    let mut k = 0;
                    for bank in &banks {
                        for j in 0..bank.len(dim) {
                            let l = logw[k] - top;
                            k += 1;
                            if l < NEGLIGIBLE_LOG_WEIGHT {
                                continue;
                            }
                            let w = l.exp();
                            total += w;
                            for (o, v) in px.iter_mut().zip(&bank.centres[j * c..(j + 1) * c]) {
                                *o += w * v;
                            }
                        }
                    }
                    px.iter_mut().for_each(|v| *v /= total);
                }
            });
        Ok(out)
    }
}

impl Denoiser for ExemplarPatch {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Result<Grid> {
        let d = self.denoise(z, cond, sigma)?;
        if sigma == 0.0 {
            return Ok(Grid::zeros(z.height(), z.width(), z.channels()));
        }
        Ok(z.zip_map(&d, |a, b| (a - b) / sigma)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_closed_form() {
        let d = GaussianAnalytic::new(vec![0.0], 1.0);
        let z = Grid::filled(1, 1, 1, 1.0);
        assert_eq!(d.eval(&z, None, 1.0).unwrap().data(), &[0.5]);
        assert!(d
            .eval(&z, None, 0.0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let at_mean = GaussianAnalytic::new(vec![2.0], 1.0);
        assert!(at_mean
            .eval(&Grid::filled(3, 3, 1, 2.0), None, 5.0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn mixture_conditioned_matches_component() {
        let mix = GaussianMixture::new(vec![vec![-1.0], vec![2.0]], 0.5);
        let g = GaussianAnalytic::new(vec![2.0], 0.5);
        let z = Grid::from_vec(1, 2, 1, vec![0.3, -0.7]).unwrap();
        let cond = LabelMap::uniform(1, 2, 1, 1).unwrap();
        let a = mix.eval(&z, Some(&cond), 1.3).unwrap();
        let b = g.eval(&z, None, 1.3).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn echo_divides_by_sigma() {
        let z = Grid::filled(2, 2, 1, 3.0);
        assert_eq!(Echo.eval(&z, None, 2.0).unwrap().data(), &[1.5; 4]);
    }

    fn two_tone() -> (Grid, LabelMap) {
        let img = Grid::from_fn(16, 16, 1, |_, x, _| if x < 8 { 0.2 } else { 0.9 });
        let labels =
            LabelMap::new(16, 16, 1, (0..256).map(|i| u8::from(i % 16 >= 8)).collect()).unwrap();
        (img, labels)
    }

    #[test]
    fn exemplar_recovers_itself_at_small_sigma() {
        let (img, labels) = two_tone();
        let d = ExemplarPatch::new(&[(img.clone(), labels)], ExemplarConfig::default()).unwrap();
        let eps = d.eval(&img, None, 1e-3).unwrap();
        assert!(eps.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn duplicate_exemplars_change_nothing() {
        let (img, labels) = two_tone();
        let one = ExemplarPatch::new(&[(img.clone(), labels.clone())], ExemplarConfig::default())
            .unwrap();
        let two = ExemplarPatch::new(
            &[(img.clone(), labels.clone()), (img.clone(), labels)],
            ExemplarConfig::default(),
        )
        .unwrap();
        let z = Grid::standard_normal(8, 8, 1, &mut Rng::new(3));
        let a = one.eval(&z, None, 0.7).unwrap();
        let b = two.eval(&z, None, 0.7).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn condition_restricts_support() {
        let (img, labels) = two_tone();
        let d = ExemplarPatch::new(&[(img, labels)], ExemplarConfig::default()).unwrap();
        let z = Grid::standard_normal(8, 8, 1, &mut Rng::new(4));
        let cond = LabelMap::uniform(8, 8, 1, 1).unwrap();
        let est = d.denoise(&z, Some(&cond), 2.0).unwrap();
        assert!(est.data().iter().all(|&v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn missing_label_is_reported() {
        let (img, labels) = two_tone();
        let d = ExemplarPatch::new(&[(img, labels)], ExemplarConfig::default()).unwrap();
        let z = Grid::zeros(4, 4, 1);
        let cond = LabelMap::uniform(4, 4, 3, 2).unwrap();
        assert!(matches!(
            d.eval(&z, Some(&cond), 1.0),
            Err(DiffusionError::LabelUnsupported(2))
        ));
    }

    #[test]
    fn counting_tracks_area() {
        let c = Counting::new(Echo);
        c.eval(&Grid::zeros(3, 4, 1), None, 1.0).unwrap();
        c.eval(&Grid::zeros(2, 2, 1), None, 1.0).unwrap();
        assert_eq!((c.calls(), c.pixels(), c.max_area()), (2, 16, 12));
    }
}
