//! Parallel-beam projection and noisy tilt-series simulation.
//!
//! A projection at angle `theta` rotates the volume by `-theta` about the
//! tilt axis `y` and integrates along the beam `z`. Detector column `u` then
//! collects the voxels with `u - c = cos(theta) (x - c) - sin(theta) (z - c)`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rotation::center;
use crate::scalar::Real;
use crate::stream_rng;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TiltScheme {
    /// Degrees.
    pub min_angle: f64,
    pub max_angle: f64,
    pub increment: f64,
    pub frames_per_tilt: usize,
}

impl Default for TiltScheme {
    fn default() -> Self {
        Self {
            min_angle: -60.0,
            max_angle: 60.0,
            increment: 2.0,
            frames_per_tilt: 1,
        }
    }
}

impl TiltScheme {
    pub fn new(min_angle: f64, max_angle: f64, increment: f64) -> Self {
        Self {
            min_angle,
            max_angle,
            increment,
            frames_per_tilt: 1,
        }
    }

    pub fn with_frames(mut self, frames_per_tilt: usize) -> Self {
        self.frames_per_tilt = frames_per_tilt;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_angle < self.max_angle && self.increment > 0.0) || self.frames_per_tilt == 0 {
            return Err(Error::InvalidConfig(format!("invalid tilt scheme {self:?}")));
        }
        let steps = (self.max_angle - self.min_angle) / self.increment;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "tilt range {}..{} is not a multiple of the increment {}",
                self.min_angle, self.max_angle, self.increment
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        ((self.max_angle - self.min_angle) / self.increment).round() as usize + 1
    }

    /// `{min, min + inc, ..., max}` in degrees.
    pub fn angles(&self) -> Vec<f64> {
        let n = self.count();
        (0..n)
            .map(|i| if i + 1 == n { self.max_angle } else { self.min_angle + i as f64 * self.increment })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// `var(clean projection) / var(noise)`.
    pub target_snr: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            target_snr: 0.25,
        }
    }
}

/// One tilt image. `frames`, if present, average exactly to `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    pub data: Image<T>,
    /// Degrees.
    pub angle: f64,
    pub frames: Option<Vec<Image<T>>>,
    /// Contrast transfer function slot; carried along but never applied.
    pub transfer_function: Option<Image<T>>,
}

impl<T: Real> Projection<T> {
    pub fn new(data: Image<T>, angle: f64) -> Self {
        Self {
            data,
            angle,
            frames: None,
            transfer_function: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiltSeries<T> {
    projections: Vec<Projection<T>>,
    scheme: TiltScheme,
    pixel_size: f64,
}

impl<T: Real> TiltSeries<T> {
    /// Checks that angles increase strictly and that all images agree in shape.
    pub fn new(projections: Vec<Projection<T>>, scheme: TiltScheme, pixel_size: f64) -> Result<Self> {
        let Some(first) = projections.first() else {
            return Err(Error::Empty("tilt series"));
        };
        let shape = first.data.shape();
        for w in projections.windows(2) {
            if w[1].angle <= w[0].angle {
                return Err(Error::InvalidConfig("tilt angles must increase strictly".into()));
            }
        }
        for p in &projections {
            let frames_ok = p.frames.iter().flatten().all(|f| f.shape() == shape);
            if p.data.shape() != shape || !frames_ok {
                return Err(Error::ShapeMismatch {
                    expected: [1, shape.0, shape.1],
                    got: [1, p.data.height(), p.data.width()],
                });
            }
        }
        if !(pixel_size > 0.0) {
            return Err(Error::InvalidConfig("pixel size must be positive".into()));
        }
        Ok(Self {
            projections,
            scheme,
            pixel_size,
        })
    }

    pub fn projections(&self) -> &[Projection<T>] {
        &self.projections
    }

    pub fn scheme(&self) -> &TiltScheme {
        &self.scheme
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.projections.iter().map(|p| p.angle).collect()
    }

    /// `(height, width)` of every projection.
    pub fn image_shape(&self) -> (usize, usize) {
        self.projections[0].data.shape()
    }

    pub fn has_frames(&self) -> bool {
        self.projections.iter().all(|p| p.frames.as_ref().is_some_and(|f| !f.is_empty()))
    }
}

/// Line-integral projection along the beam after rotating by `-angle`
/// (degrees) about `y`, with bilinear interpolation in each x-z slice.
pub fn project<T: Real>(v: &Volume<T>, angle: f64) -> Result<Projection<T>> {
    let s = v.shape();
    if !s.is_cubic() {
        return Err(Error::InvalidConfig("projection needs a cubic volume".into()));
    }
    let n = s.d;
    let c = center(n);
    let (sn, cs) = angle.to_radians().sin_cos();
    let mut img = vec![0.0f64; s.h * s.w];
    let data = v.data();
    for zp in 0..n {
        let dz = zp as f64 - c;
        for xp in 0..n {
            let dx = xp as f64 - c;
            let sx = c + cs * dx + sn * dz;
            let sz = c - sn * dx + cs * dz;
            let (x0, z0) = (sx.floor(), sz.floor());
            let (fx, fz) = (sx - x0, sz - z0);
            let (x0, z0) = (x0 as isize, z0 as isize);
            for (oz, wz) in [(0isize, 1.0 - fz), (1, fz)] {
                let zi = z0 + oz;
                if wz == 0.0 || zi < 0 || zi >= n as isize {
                    continue;
                }
                for (ox, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let xi = x0 + ox;
                    if wx == 0.0 || xi < 0 || xi >= n as isize {
                        continue;
                    }
                    let w = wz * wx;
                    let base = zi as usize * s.h * s.w + xi as usize;
                    for y in 0..s.h {
                        img[y * s.w + xp] += w * data[base + y * s.w].as_f64();
                    }
                }
            }
        }
    }
    let img = Image::from_vec(s.h, s.w, img.into_iter().map(T::of).collect())?;
    Ok(Projection::new(img, angle))
}

/// Simulates one projection per scheme angle with additive Gaussian noise.
///
/// The noise variance of each tilt is `var(clean) / target_snr`. With
/// `m > 1` frames per tilt every frame gets an independent draw of variance
/// `m` times that, so the frame average meets the target. Tilt `k`, frame `j`
/// draws from stream `k * m + j` of `seed`, so the result does not depend on
/// the worker count.
pub fn simulate_tilt_series<T: Real>(
    v: &Volume<T>,
    scheme: &TiltScheme,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<TiltSeries<T>> {
    scheme.validate()?;
    if !(noise.target_snr > 0.0) {
        return Err(Error::InvalidConfig("target_snr must be positive".into()));
    }
    let m = scheme.frames_per_tilt;
    let projections = scheme
        .angles()
        .into_par_iter()
        .enumerate()
        .map(|(k, angle)| {
            let clean = project(v, angle)?;
            let sigma = (clean.data.variance() / noise.target_snr).sqrt();
            let noisy = |stream: usize, sigma: f64| {
                let mut rng = stream_rng(seed, stream as u64);
                let data = clean
                    .data
                    .data()
                    .iter()
                    .map(|&c| T::of(c.as_f64() + sigma * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                Image::from_vec(clean.data.height(), clean.data.width(), data)
            };
            if m == 1 {
                return Ok(Projection::new(noisy(k, sigma)?, angle));
            }
            let frames = (0..m)
                .map(|j| noisy(k * m + j, sigma * (m as f64).sqrt()))
                .collect::<Result<Vec<_>>>()?;
            Ok(Projection {
                data: mean_image(&frames),
                angle,
                frames: Some(frames),
                transfer_function: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TiltSeries::new(projections, *scheme, v.voxel_size())
}

/// Pixelwise mean of equally shaped images.
pub(crate) fn mean_image<T: Real>(frames: &[Image<T>]) -> Image<T> {
    let (h, w) = frames[0].shape();
    let inv = 1.0 / frames.len() as f64;
    let data = (0..h * w)
        .map(|i| T::of(frames.iter().map(|f| f.data()[i].as_f64()).sum::<f64>() * inv))
        .collect();
    Image::from_vec(h, w, data).expect("shape taken from the frames")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;

    #[test]
    fn scheme_angle_counts() {
        assert_eq!(TiltScheme::new(-60.0, 60.0, 3.0).angles().len(), 41);
        assert_eq!(TiltScheme::new(-65.0, 65.0, 2.0).count(), 66);
        assert!(TiltScheme::new(-60.0, 61.0, 2.0).validate().is_err());
        assert!(TiltScheme::new(10.0, -10.0, 2.0).validate().is_err());
    }

    #[test]
    fn zero_angle_is_straight_sum() {
        let v = Volume::from_fn(Shape3::cube(8), |z, y, x| ((z * 7 + y * 3 + x) % 5) as f64);
        let p = project(&v, 0.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let s: f64 = (0..8).map(|z| v.get(z, y, x)).sum();
                assert_eq!(p.data.get(y, x), s);
            }
        }
    }

    #[test]
    fn projection_is_linear() {
        let v = Volume::from_fn(Shape3::cube(8), |z, y, x| ((z + 2 * y + 3 * x) as f64).sin());
        let a = project(&v, 25.0).unwrap();
        let b = project(&v.scaled(-2.5), 25.0).unwrap();
        for (x, y) in a.data.data().iter().zip(b.data.data()) {
            assert!((-2.5 * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn frames_average_to_data() {
        let v = Volume::from_fn(Shape3::cube(8), |z, _, x| (z + x) as f32);
        let t = simulate_tilt_series(&v, &TiltScheme::new(-10.0, 10.0, 10.0).with_frames(4), &NoiseConfig::default(), 1)
            .unwrap();
        assert_eq!(t.len(), 3);
        for p in t.projections() {
            let mean = mean_image(p.frames.as_ref().unwrap());
            for (a, b) in mean.data().iter().zip(p.data.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
