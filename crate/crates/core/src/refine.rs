//! Final tomogram from a fitted model and the two half reconstructions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::VolumeMap;
use crate::rotation::EulerAngles;
use crate::scalar::Real;
use crate::subtomo::{compute_norm_stats, grid_corners, normalize_tomogram, reassemble, NormStats};
use crate::volume::{Fft3, Shape3, Volume};
use crate::wedge::{apply_wedge_with, wedge_mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub cube_size: usize,
    pub overlap: usize,
    /// Statistics the model inputs were standardized with during fitting.
    pub fit_norm: NormStats,
    /// Mean and standard deviation the tomograms are rescaled to first.
    pub target_norm: NormStats,
}

/// Runs the model over overlapping cubes of both halves and averages the two
/// reassembled branches. The output is in the units of the rescaled
/// tomograms (`target_norm`).
pub fn refine<T: Real, F: VolumeMap<T>>(f: &F, r0: &Volume<T>, r1: &Volume<T>, cfg: &RefineConfig) -> Result<Volume<T>> {
    r0.shape().ensure_same(r1.shape())?;
    if cfg.overlap >= cfg.cube_size {
        return Err(Error::InvalidConfig("overlap must be smaller than the cube".into()));
    }
    let corners = grid_corners(r0.shape(), cfg.cube_size, cfg.overlap)?;
    let cube = Shape3::cube(cfg.cube_size);
    let branch = |r: &Volume<T>| -> Result<Volume<T>> {
        let r = normalize_tomogram(r, &cfg.target_norm)?;
        let outs = corners
            .par_iter()
            .map(|&c| {
                let x = cfg.fit_norm.standardize(&r.crop(c, cube)?);
                Ok(cfg.fit_norm.destandardize(&f.apply(&x)?))
            })
            .collect::<Result<Vec<_>>>()?;
        reassemble(&outs, &corners, r.shape(), Some(([0, 0, 0], r.shape())))
    };
    let a = branch(r0)?;
    let b = branch(r1)?;
    let half = T::of(0.5);
    a.zip_map(&b, |x, y| (x + y) * half)
}

/// Statistics of the unrotated model inputs of one tomogram: every cube is
/// center-cropped to `crop` and the canonical wedge applied.
pub fn input_stats<T: Real>(cubes: &[Volume<T>], crop: usize, alpha_max: f64) -> Result<NormStats> {
    let s = Shape3::cube(crop);
    let m = wedge_mask(s, alpha_max, EulerAngles::IDENTITY)?;
    let fft = Fft3::new(s);
    let inputs = cubes
        .iter()
        .map(|c| apply_wedge_with(&fft, &c.crop_center(s)?, &m))
        .collect::<Result<Vec<_>>>()?;
    compute_norm_stats(&inputs)
}
