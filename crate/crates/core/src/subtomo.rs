//! Tilt-series splitting, sub-tomogram extraction and reassembly, and
//! global intensity normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sim::{mean_image, Projection, TiltScheme, TiltSeries};
use crate::volume::{Shape3, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    EvenOdd,
    FrameBased,
}

/// Splits a tilt series into two halves with independent noise.
///
/// `EvenOdd` partitions by acquisition index. `FrameBased` keeps every tilt
/// and averages the even-index frames into one half and the odd-index frames
/// into the other.
pub fn split<T: Real>(t: &TiltSeries<T>, mode: SplitMode) -> Result<(TiltSeries<T>, TiltSeries<T>)> {
    let s = t.scheme();
    match mode {
        SplitMode::EvenOdd => {
            if t.len() < 2 {
                return Err(Error::InvalidConfig("even/odd split needs at least two tilts".into()));
            }
            let pick = |parity: usize| {
                let projections: Vec<_> = t.projections().iter().skip(parity).step_by(2).cloned().collect();
                let first = projections[0].angle;
                let last = projections[projections.len() - 1].angle;
                let scheme = TiltScheme {
                    min_angle: first,
                    max_angle: if projections.len() > 1 { last } else { first + 2.0 * s.increment },
                    increment: 2.0 * s.increment,
                    frames_per_tilt: s.frames_per_tilt,
                };
                TiltSeries::new(projections, scheme, t.pixel_size())
            };
            Ok((pick(0)?, pick(1)?))
        }
        SplitMode::FrameBased => {
            let frameless = || Error::InvalidConfig("frame-based split needs at least two frames per tilt".into());
            if !t.has_frames() {
                return Err(frameless());
            }
            let mut halves = (Vec::with_capacity(t.len()), Vec::with_capacity(t.len()));
            for p in t.projections() {
                let frames = p.frames.as_ref().expect("checked by has_frames");
                if frames.len() < 2 {
                    return Err(frameless());
                }
                let mut even = Vec::new();
                let mut odd = Vec::new();
                for (i, f) in frames.iter().enumerate() {
                    if i % 2 == 0 { &mut even } else { &mut odd }.push(f.clone());
                }
                let half = |fr: Vec<_>| Projection {
                    data: mean_image(&fr),
                    angle: p.angle,
                    frames: Some(fr),
                    transfer_function: p.transfer_function.clone(),
                };
                halves.0.push(half(even));
                halves.1.push(half(odd));
            }
            let m = s.frames_per_tilt.max(2);
            let scheme0 = TiltScheme {
                frames_per_tilt: m.div_ceil(2),
                ..*s
            };
            let scheme1 = TiltScheme {
                frames_per_tilt: m / 2,
                ..*s
            };
            Ok((
                TiltSeries::new(halves.0, scheme0, t.pixel_size())?,
                TiltSeries::new(halves.1, scheme1, t.pixel_size())?,
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub cube_size: usize,
    pub overlap: usize,
    /// Binary (0/1) sample mask of the tomogram.
    #[serde(skip)]
    pub content_mask: Option<Volume<f32>>,
    pub min_content_fraction: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            cube_size: 32,
            overlap: 0,
            content_mask: None,
            min_content_fraction: 0.0,
        }
    }
}

impl ExtractConfig {
    pub fn new(cube_size: usize, overlap: usize) -> Self {
        Self {
            cube_size,
            overlap,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cube_size == 0 || self.overlap >= self.cube_size {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= overlap < cube_size, got overlap {} and cube {}",
                self.overlap, self.cube_size
            )));
        }
        if !(0.0..=1.0).contains(&self.min_content_fraction) {
            return Err(Error::InvalidConfig("min_content_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Co-located cubes from the two half reconstructions; `location` is the
/// `(z, y, x)` corner in the parent tomogram.
#[derive(Clone, Debug, PartialEq)]
pub struct SubTomoPair<T> {
    pub v0: Volume<T>,
    pub v1: Volume<T>,
    pub location: [usize; 3],
}

/// Corner positions along one axis: stride `cube - overlap`, with the last
/// cube clamped to the boundary.
pub fn grid_positions(len: usize, cube: usize, overlap: usize) -> Result<Vec<usize>> {
    if cube > len {
        return Err(Error::InvalidConfig(format!("cube of {cube} voxels exceeds axis length {len}")));
    }
    if overlap >= cube {
        return Err(Error::InvalidConfig("overlap must be smaller than the cube".into()));
    }
    let stride = cube - overlap;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p + cube <= len).collect();
    if *out.last().expect("position 0 always fits") + cube < len {
        out.push(len - cube);
    }
    Ok(out)
}

/// All corners of a regular cube grid over `shape`.
pub fn grid_corners(shape: Shape3, cube: usize, overlap: usize) -> Result<Vec<[usize; 3]>> {
    let pz = grid_positions(shape.d, cube, overlap)?;
    let py = grid_positions(shape.h, cube, overlap)?;
    let px = grid_positions(shape.w, cube, overlap)?;
    let mut out = Vec::with_capacity(pz.len() * py.len() * px.len());
    for &z in &pz {
        for &y in &py {
            for &x in &px {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

pub fn extract_pairs<T: Real>(r0: &Volume<T>, r1: &Volume<T>, cfg: &ExtractConfig) -> Result<Vec<SubTomoPair<T>>> {
    cfg.validate()?;
    r0.shape().ensure_same(r1.shape())?;
    if let Some(m) = &cfg.content_mask {
        r0.shape().ensure_same(m.shape())?;
    }
    let cube = Shape3::cube(cfg.cube_size);
    let mut out = Vec::new();
    for corner in grid_corners(r0.shape(), cfg.cube_size, cfg.overlap)? {
        if let Some(m) = &cfg.content_mask {
            let frac = m.crop(corner, cube)?.mean();
            if frac < cfg.min_content_fraction {
                continue;
            }
        }
        out.push(SubTomoPair {
            v0: r0.crop(corner, cube)?,
            v1: r1.crop(corner, cube)?,
            location: corner,
        });
    }
    Ok(out)
}

/// Axis-aligned box `(corner, shape)` that must be fully covered.
pub type Region = ([usize; 3], Shape3);

/// Places cubes at their corners, averaging where they overlap. Uncovered
/// voxels are 0; if `region` is given, any uncovered voxel inside it is an
/// error.
pub fn reassemble<T: Real>(
    cubes: &[Volume<T>],
    locations: &[[usize; 3]],
    full_shape: Shape3,
    region: Option<Region>,
) -> Result<Volume<T>> {
    if cubes.len() != locations.len() {
        return Err(Error::InvalidConfig("one location per cube is required".into()));
    }
    let mut sum = vec![0.0f64; full_shape.len()];
    let mut count = vec![0u32; full_shape.len()];
    let mut voxel_size = 1.0;
    for (c, loc) in cubes.iter().zip(locations) {
        let s = c.shape();
        if let Some(first) = cubes.first() {
            first.shape().ensure_same(s)?;
        }
        if loc[0] + s.d > full_shape.d || loc[1] + s.h > full_shape.h || loc[2] + s.w > full_shape.w {
            return Err(Error::InvalidConfig(format!("cube at {loc:?} leaves the volume")));
        }
        voxel_size = c.voxel_size();
        for z in 0..s.d {
            for y in 0..s.h {
                let src = &c.data()[s.index(z, y, 0)..][..s.w];
                let o = full_shape.index(loc[0] + z, loc[1] + y, loc[2]);
                for (x, &v) in src.iter().enumerate() {
                    sum[o + x] += v.as_f64();
                    count[o + x] += 1;
                }
            }
        }
    }
    if let Some((corner, rs)) = region {
        let mut uncovered = 0;
        for z in corner[0]..(corner[0] + rs.d).min(full_shape.d) {
            for y in corner[1]..(corner[1] + rs.h).min(full_shape.h) {
                for x in corner[2]..(corner[2] + rs.w).min(full_shape.w) {
                    uncovered += (count[full_shape.index(z, y, x)] == 0) as usize;
                }
            }
        }
        if uncovered > 0 {
            return Err(Error::Uncovered { uncovered });
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { T::zero() } else { T::of(s / c as f64) })
        .collect();
    Volume::from_vec(full_shape, data, voxel_size)
}

/// Global mean and standard deviation used to standardize model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormStats {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::ZeroVariance);
        }
        Ok(Self { mu, sigma })
    }

    /// `(v - mu) / sigma`.
    pub fn standardize<T: Real>(&self, v: &Volume<T>) -> Volume<T> {
        let (mu, inv) = (T::of(self.mu), T::of(1.0 / self.sigma));
        v.map(|x| (x - mu) * inv)
    }

    /// `v * sigma + mu`.
    pub fn destandardize<T: Real>(&self, v: &Volume<T>) -> Volume<T> {
        let (mu, s) = (T::of(self.mu), T::of(self.sigma));
        v.map(|x| x * s + mu)
    }
}

/// `mu` = mean of per-cube means, `sigma` = sqrt of the mean per-cube variance.
pub fn compute_norm_stats<T: Real>(inputs: &[Volume<T>]) -> Result<NormStats> {
    if inputs.is_empty() {
        return Err(Error::Empty("normalization inputs"));
    }
    let n = inputs.len() as f64;
    let mu = inputs.iter().map(|v| v.mean()).sum::<f64>() / n;
    let var = inputs.iter().map(|v| v.variance()).sum::<f64>() / n;
    NormStats::new(mu, var.sqrt())
}

/// Affine rescale of `r` to mean `target.mu` and standard deviation
/// `target.sigma`.
pub fn normalize_tomogram<T: Real>(r: &Volume<T>, target: &NormStats) -> Result<Volume<T>> {
    let (m, s) = (r.mean(), r.std());
    if !(s > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let a = target.sigma / s;
    let b = target.mu - a * m;
    Ok(r.map(|x| T::of(a * x.as_f64() + b)))
}

/// Intensity-threshold sample mask: Gaussian smoothing with `sigma` voxels,
/// then `1` where the smoothed value exceeds `mean + k * std`.
pub fn threshold_mask<T: Real>(r: &Volume<T>, sigma: f64, k: f64) -> Volume<f32> {
    let smooth = gaussian_blur(r, sigma);
    let thr = smooth.mean() + k * smooth.std();
    Volume::from_vec(
        r.shape(),
        smooth.data().iter().map(|&v| if v > thr { 1.0 } else { 0.0 }).collect(),
        r.voxel_size(),
    )
    .expect("same shape as the input")
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur<T: Real>(r: &Volume<T>, sigma: f64) -> Volume<f64> {
    let s = r.shape();
    let mut cur: Vec<f64> = r.data().iter().map(|v| v.as_f64()).collect();
    if sigma <= 0.0 {
        return Volume::from_vec(s, cur, r.voxel_size()).expect("same shape");
    }
    let rad = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let dims = [s.d, s.h, s.w];
    let strides = [s.h * s.w, s.w, 1];
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let n = dims[axis] as isize;
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / strides[axis]) % dims[axis];
            let base = i - pos * strides[axis];
            let mut acc = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                let q = (pos as isize + j as isize - rad).clamp(0, n - 1) as usize;
                acc += w * cur[base + q * strides[axis]];
            }
            *out = acc / norm;
        }
        cur = next;
    }
    Volume::from_vec(s, cur, r.voxel_size()).expect("same shape")
}
