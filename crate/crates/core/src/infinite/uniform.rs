use crate::grid::{lanczos_lowpass_with, resample, resample_with, Boundary, Grid, ResampleMode};
use crate::rng::Rng;

use super::{InfiniteError, Result};

pub const DEFAULT_CUTOFF: f64 = 0.1;
pub const DEFAULT_COARSE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformizeConfig {
    /// Low-pass cutoff in cycles per sample.
    pub cutoff: f64,
    /// Side of the coarse grid the prototype's low frequencies are reduced to.
    pub coarse: usize,
    /// Edge handling of the low-pass; circular for fields that must tile.
    pub boundary: Boundary,
}

impl Default for UniformizeConfig {
    fn default() -> Self {
        Self {
            cutoff: DEFAULT_CUTOFF,
            coarse: DEFAULT_COARSE,
            boundary: Boundary::Reflect,
        }
    }
}

/// Output of [`uniformize`] together with its parts.
#[derive(Clone, Debug)]
pub struct Uniformized {
    pub field: Grid,
    /// `w - blur(w)`.
    pub high: Grid,
    /// The low-frequency component added back, `field - high`.
    pub injected: Grid,
    /// `downscale(blur(p))` before shuffling.
    pub prototype_coarse: Grid,
    /// The shuffled coarse grid used for each prototype-sized tile, row-major.
    pub coarse_tiles: Vec<Grid>,
}

fn blur(g: &Grid, cfg: &UniformizeConfig) -> Result<Grid> {
    Ok(lanczos_lowpass_with(g, cfg.cutoff, cfg.boundary)?.snapped())
}

/// Keeps the high frequencies of `w` and replaces its low frequencies with a
/// site-shuffled copy of the prototype's, independently per prototype-sized
/// tile of `w`. All channels of a coarse site move together.
pub fn uniformize(w: &Grid, p: &Grid, cfg: UniformizeConfig, rng: &mut Rng) -> Result<Uniformized> {
    uniformize_with(w, p, cfg, |n| {
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        perm
    })
}

/// [`uniformize`] with caller-chosen permutations; `permute(n)` returns the
/// source site for each destination site of one tile.
pub fn uniformize_with(
    w: &Grid,
    p: &Grid,
    cfg: UniformizeConfig,
    mut permute: impl FnMut(usize) -> Vec<usize>,
) -> Result<Uniformized> {
    if w.channels() != p.channels() {
        return Err(InfiniteError::InvalidArgument(format!(
            "noise has {} channels, prototype {}",
            w.channels(),
            p.channels()
        )));
    }
    if cfg.coarse == 0 || cfg.coarse > p.height() || cfg.coarse > p.width() {
        return Err(InfiniteError::InvalidArgument(format!(
            "coarse grid {0}x{0} does not fit the {1}x{2} prototype",
            cfg.coarse,
            p.height(),
            p.width()
        )));
    }
    let high = w.zip_map(&blur(w, &cfg)?, |a, b| a - b)?;
    let prototype_coarse = resample(
        &blur(p, &cfg)?,
        cfg.coarse,
        cfg.coarse,
        ResampleMode::BoxDown,
    )?;
    let (th, tw) = (p.height(), p.width());
    let sites = cfg.coarse * cfg.coarse;
    let c = w.channels();
    let (nty, ntx) = (w.height().div_ceil(th), w.width().div_ceil(tw));
    // All tiles' shuffled coarse grids are upscaled as one field, so a tile
    // boundary is interpolated like any other pair of neighbouring sites.
    let mut coarse_field = Grid::zeros(nty * cfg.coarse, ntx * cfg.coarse, c);
    let mut coarse_tiles = Vec::with_capacity(nty * ntx);
    for ty in 0..nty {
        for tx in 0..ntx {
            let perm = permute(sites);
            if perm.len() != sites {
                return Err(InfiniteError::InvalidArgument(format!(
                    "permutation has {} entries for {sites} sites",
                    perm.len()
                )));
            }
            let mut shuffled = prototype_coarse.clone();
            for (dst, &src) in perm.iter().enumerate() {
                if src >= sites {
                    return Err(InfiniteError::InvalidArgument(format!(
                        "permutation entry {src} out of range"
                    )));
                }
                let (sy, sx) = (src / cfg.coarse, src % cfg.coarse);
                shuffled
                    .pixel_mut(dst / cfg.coarse, dst % cfg.coarse)
                    .copy_from_slice(prototype_coarse.pixel(sy, sx));
            }
            coarse_field.paste(ty * cfg.coarse, tx * cfg.coarse, &shuffled)?;
            coarse_tiles.push(shuffled);
        }
    }
    let up = resample_with(
        &coarse_field,
        nty * th,
        ntx * tw,
        ResampleMode::Lanczos,
        cfg.boundary,
    )?
    .snapped();
    let injected = up.crop(0, 0, w.height(), w.width())?;
    let field = high.zip_map(&injected, |a, b| a + b)?;
    Ok(Uniformized {
        field,
        high,
        injected,
        prototype_coarse,
        coarse_tiles,
    })
}

/// A fresh large noise field whose first `tile x tile` block is the prototype
/// that every tile, itself included, is uniformized against.
pub fn uniform_noise_field(
    height: usize,
    width: usize,
    channels: usize,
    tile: usize,
    cfg: UniformizeConfig,
    rng: &mut Rng,
) -> Result<Uniformized> {
    let w = Grid::standard_normal(height, width, channels, rng);
    let prototype = w.crop(0, 0, tile.min(height), tile.min(width))?;
    uniformize(&w, &prototype, cfg, rng)
}

/// [`uniform_noise_field`] against an explicit prototype, e.g. one cached per project.
pub fn uniform_noise_with_prototype(
    height: usize,
    width: usize,
    prototype: &Grid,
    cfg: UniformizeConfig,
    rng: &mut Rng,
) -> Result<Uniformized> {
    let w = Grid::standard_normal(height, width, prototype.channels(), rng);
    uniformize(&w, prototype, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(g: &Grid) -> Vec<u64> {
        let mut v: Vec<u64> = g.data().iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn identity_permutation_with_self_prototype() {
        let w = Grid::standard_normal(32, 32, 3, &mut Rng::new(1));
        let cfg = UniformizeConfig {
            coarse: 32,
            ..Default::default()
        };
        let u = uniformize_with(&w, &w, cfg, |n| (0..n).collect()).unwrap();
        assert_eq!(u.field, w);
    }

    #[test]
    fn high_frequencies_survive_exactly() {
        let mut rng = Rng::new(2);
        let w = Grid::standard_normal(96, 80, 2, &mut rng);
        let p = Grid::standard_normal(64, 64, 2, &mut rng);
        let u = uniformize(&w, &p, UniformizeConfig::default(), &mut rng).unwrap();
        let back = u.field.zip_map(&u.injected, |a, b| a - b).unwrap();
        assert_eq!(back, u.high);
        assert_eq!(u.coarse_tiles.len(), 4);
        for t in &u.coarse_tiles {
            assert_eq!(sorted(t), sorted(&u.prototype_coarse));
        }
    }

    #[test]
    fn coarse_grid_must_fit() {
        let w = Grid::zeros(8, 8, 1);
        let err = uniformize(&w, &w, UniformizeConfig::default(), &mut Rng::new(0));
        assert!(err.is_err());
    }
}
