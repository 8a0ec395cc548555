//! Real and Fourier-domain 3D grids.
//!
//! Volumes are stored row-major with axes ordered `(z, y, x)`: `x` is the
//! fastest-varying index. `z` is the beam axis and `y` the tilt axis.
//!
//! The Fourier transform is unnormalized in the forward direction and scaled
//! by `1 / (D * H * W)` on the inverse, so that `sum |v|^2 = sum |F v|^2 / N`.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Grid extent as `(depth, height, width)` = `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Self { d: n, h: n, w: n }
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn is_cubic(&self) -> bool {
        self.d == self.h && self.h == self.w
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub(crate) fn ensure_same(&self, other: Shape3) -> Result<()> {
        if *self == other {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.as_array(),
                got: other.as_array(),
            })
        }
    }
}

/// Signed integer frequency of DFT bin `i` on an axis of length `n`
/// (numpy `fftfreq` times `n`).
#[inline]
pub fn fft_freq(i: usize, n: usize) -> f64 {
    if i <= (n - 1) / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// `true` if bin `i` is the Nyquist bin of an even-length axis.
#[inline]
pub(crate) fn is_nyquist(i: usize, n: usize) -> bool {
    n % 2 == 0 && i == n / 2
}

/// Real-valued 3D grid with isotropic voxel spacing in Angstrom.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    shape: Shape3,
    voxel_size: f64,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        Self {
            shape,
            voxel_size: 1.0,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a volume from raw data, validating length, finiteness and
    /// voxel size.
    pub fn from_vec(shape: Shape3, data: Vec<T>, voxel_size: f64) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidConfig("volume dimensions must be >= 1".into()));
        }
        if data.len() != shape.len() {
            return Err(Error::InvalidConfig(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape.as_array()
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("voxel size must be positive, got {voxel_size}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(Self {
            shape,
            voxel_size,
            data,
        })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.d {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(z, y, x));
                }
            }
        }
        Self {
            shape,
            voxel_size: 1.0,
            data,
        }
    }

    pub fn with_voxel_size(mut self, voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        self.voxel_size = voxel_size;
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Side length of a cubic volume.
    pub fn side(&self) -> Option<usize> {
        self.shape.is_cubic().then_some(self.shape.d)
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.shape.index(z, y, x);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            voxel_size: self.voxel_size,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.shape.ensure_same(other.shape)?;
        Ok(Self {
            shape: self.shape,
            voxel_size: self.voxel_size,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scaled(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population variance (divides by the voxel count).
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.shape.ensure_same(other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
    }

    /// Copies the box of `size` starting at `corner = (z, y, x)`.
    pub fn crop(&self, corner: [usize; 3], size: Shape3) -> Result<Self> {
        if corner[0] + size.d > self.shape.d
            || corner[1] + size.h > self.shape.h
            || corner[2] + size.w > self.shape.w
        {
            return Err(Error::InvalidConfig(format!(
                "crop {:?} at {corner:?} exceeds volume {:?}",
                size.as_array(),
                self.shape.as_array()
            )));
        }
        let mut data = Vec::with_capacity(size.len());
        for z in 0..size.d {
            for y in 0..size.h {
                let start = self.shape.index(corner[0] + z, corner[1] + y, corner[2]);
                data.extend_from_slice(&self.data[start..start + size.w]);
            }
        }
        Ok(Self {
            shape: size,
            voxel_size: self.voxel_size,
            data,
        })
    }

    /// Central crop. For odd differences the extra voxel is dropped at the
    /// high end, which keeps the grid center `n / 2` fixed.
    pub fn crop_center(&self, size: Shape3) -> Result<Self> {
        let off = |n: usize, m: usize| (n / 2).saturating_sub(m / 2);
        if size.d > self.shape.d || size.h > self.shape.h || size.w > self.shape.w {
            return Err(Error::InvalidConfig("center crop larger than volume".into()));
        }
        self.crop(
            [off(self.shape.d, size.d), off(self.shape.h, size.h), off(self.shape.w, size.w)],
            size,
        )
    }

    /// Converts to another scalar precision.
    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            voxel_size: self.voxel_size,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Complex 3D grid holding the unnormalized DFT of a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralVolume<T> {
    shape: Shape3,
    voxel_size: f64,
    data: Vec<Complex<T>>,
}

impl<T: Real> SpectralVolume<T> {
    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            voxel_size: 1.0,
            data: vec![Complex::new(T::zero(), T::zero()); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<Complex<T>>, voxel_size: f64) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidConfig("spectrum length does not match shape".into()));
        }
        Ok(Self {
            shape,
            voxel_size,
            data,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> Complex<T> {
        self.data[self.shape.index(z, y, x)]
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr().as_f64()).sum()
    }
}

/// Planned 3D FFT for one grid shape. Plans are immutable and shareable
/// across threads; scratch space is allocated per call.
pub struct Fft3<T: Real> {
    shape: Shape3,
    forward: [Arc<dyn Fft<T>>; 3],
    inverse: [Arc<dyn Fft<T>>; 3],
}

impl<T: Real> Fft3<T> {
    pub fn new(shape: Shape3) -> Self {
        let mut planner = FftPlanner::new();
        let plan = |p: &mut FftPlanner<T>, inv: bool| {
            let mk = |p: &mut FftPlanner<T>, n| if inv { p.plan_fft_inverse(n) } else { p.plan_fft_forward(n) };
            [mk(p, shape.d), mk(p, shape.h), mk(p, shape.w)]
        };
        let forward = plan(&mut planner, false);
        let inverse = plan(&mut planner, true);
        Self {
            shape,
            forward,
            inverse,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    fn run(&self, plans: &[Arc<dyn Fft<T>>; 3], buf: &mut [Complex<T>]) {
        let Shape3 { d, h, w } = self.shape;
        assert_eq!(buf.len(), self.shape.len());
        let scratch_len = plans.iter().map(|p| p.get_inplace_scratch_len()).max().unwrap_or(0);
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); scratch_len];

        // x: contiguous rows, processed in one batched call
        if w > 1 {
            plans[2].process_with_scratch(buf, &mut scratch);
        }
        if h > 1 {
            let mut line = vec![Complex::new(T::zero(), T::zero()); h * w];
            for z in 0..d {
                let plane = &mut buf[z * h * w..(z + 1) * h * w];
                // transpose (y, x) -> (x, y), transform, transpose back
                for y in 0..h {
                    for x in 0..w {
                        line[x * h + y] = plane[y * w + x];
                    }
                }
                plans[1].process_with_scratch(&mut line, &mut scratch);
                for y in 0..h {
                    for x in 0..w {
                        plane[y * w + x] = line[x * h + y];
                    }
                }
            }
        }
        if d > 1 {
            let hw = h * w;
            let mut cols = vec![Complex::new(T::zero(), T::zero()); d * hw];
            for z in 0..d {
                for p in 0..hw {
                    cols[p * d + z] = buf[z * hw + p];
                }
            }
            plans[0].process_with_scratch(&mut cols, &mut scratch);
            for z in 0..d {
                for p in 0..hw {
                    buf[z * hw + p] = cols[p * d + z];
                }
            }
        }
    }

    /// Unnormalized forward transform in place.
    pub fn forward_in_place(&self, buf: &mut [Complex<T>]) {
        self.run(&self.forward, buf);
    }

    /// Inverse transform in place, including the `1/N` factor.
    pub fn inverse_in_place(&self, buf: &mut [Complex<T>]) {
        self.run(&self.inverse, buf);
        let s = T::one() / T::of(self.shape.len() as f64);
        for c in buf.iter_mut() {
            *c = *c * s;
        }
    }

    pub fn forward(&self, v: &Volume<T>) -> SpectralVolume<T> {
        assert_eq!(v.shape(), self.shape, "FFT plan shape mismatch");
        let mut data: Vec<Complex<T>> = v.data().iter().map(|&r| Complex::new(r, T::zero())).collect();
        self.forward_in_place(&mut data);
        SpectralVolume {
            shape: self.shape,
            voxel_size: v.voxel_size(),
            data,
        }
    }

    /// Inverse transform that returns the real part, failing if the
    /// imaginary residue exceeds `1e-4` of the real-part RMS.
    pub fn inverse(&self, s: &SpectralVolume<T>) -> Result<Volume<T>> {
        let mut data = s.data.clone();
        self.inverse_in_place(&mut data);
        real_part(self.shape, s.voxel_size, data)
    }
}

pub(crate) fn real_part<T: Real>(shape: Shape3, voxel_size: f64, data: Vec<Complex<T>>) -> Result<Volume<T>> {
    let n = data.len() as f64;
    let (mut re2, mut im2) = (0.0f64, 0.0f64);
    for c in &data {
        re2 += c.re.as_f64().powi(2);
        im2 += c.im.as_f64().powi(2);
    }
    let re_rms = (re2 / n).sqrt();
    let im_rms = (im2 / n).sqrt();
    if im_rms > 1e-4 * re_rms.max(f64::MIN_POSITIVE) && im_rms > 1e-30 {
        return Err(Error::NonHermitian { rms: im_rms });
    }
    Ok(Volume {
        shape,
        voxel_size,
        data: data.into_iter().map(|c| c.re).collect(),
    })
}

/// Forward 3D DFT of a volume (unnormalized).
pub fn to_fourier<T: Real>(v: &Volume<T>) -> SpectralVolume<T> {
    Fft3::new(v.shape()).forward(v)
}

/// Inverse 3D DFT (with `1/N`), returning the real part.
pub fn from_fourier<T: Real>(s: &SpectralVolume<T>) -> Result<Volume<T>> {
    Fft3::new(s.shape()).inverse(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: Shape3, seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_volume_has_only_dc() {
        let v = Volume::filled(Shape3::cube(8), 2.5f64);
        let s = to_fourier(&v);
        assert!((s.get(0, 0, 0).re - 512.0 * 2.5).abs() < 1e-9);
        let rest: f64 = s.data()[1..].iter().map(|c| c.norm()).sum();
        assert!(rest < 1e-9);
    }

    #[test]
    fn dc_delta_inverts_to_constant() {
        let shape = Shape3::cube(8);
        let mut s = SpectralVolume::<f64>::zeros(shape);
        s.data_mut()[0] = Complex::new(512.0, 0.0);
        let v = from_fourier(&s).unwrap();
        assert!(v.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_parseval() {
        let v = random_volume(Shape3::new(6, 8, 10), 1);
        let s = to_fourier(&v);
        let back = from_fourier(&s).unwrap();
        let err: f64 = v.sub(&back).unwrap().norm_sq();
        assert!((err / v.norm_sq()).sqrt() < 1e-6);
        let rel = (v.norm_sq() - s.energy() / v.shape().len() as f64).abs() / v.norm_sq();
        assert!(rel < 1e-6);
    }

    #[test]
    fn round_trip_f32() {
        let v: Volume<f32> = random_volume(Shape3::cube(16), 2).cast();
        let back = from_fourier(&to_fourier(&v)).unwrap();
        let err = v.sub(&back).unwrap().norm_sq();
        assert!((err / v.norm_sq()).sqrt() < 1e-6);
    }

    #[test]
    fn dc_equals_voxel_sum() {
        let v = random_volume(Shape3::new(5, 4, 3), 3);
        assert!((to_fourier(&v).get(0, 0, 0).re - v.sum()).abs() < 1e-10);
    }

    #[test]
    fn non_hermitian_spectrum_is_rejected() {
        let mut s = SpectralVolume::<f64>::zeros(Shape3::cube(4));
        s.data_mut()[1] = Complex::new(1.0, 0.0);
        assert!(matches!(from_fourier(&s), Err(Error::NonHermitian { .. })));
    }

    #[test]
    fn spectrum_round_trip_for_hermitian_input() {
        let v = random_volume(Shape3::cube(8), 4);
        let s = to_fourier(&v);
        let again = to_fourier(&from_fourier(&s).unwrap());
        let diff: f64 = s.data().iter().zip(again.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!((diff / s.energy()).sqrt() < 1e-10);
    }

    #[test]
    fn fft_freq_convention() {
        let f: Vec<f64> = (0..6).map(|i| fft_freq(i, 6)).collect();
        assert_eq!(f, vec![0.0, 1.0, 2.0, -3.0, -2.0, -1.0]);
        let f: Vec<f64> = (0..5).map(|i| fft_freq(i, 5)).collect();
        assert_eq!(f, vec![0.0, 1.0, 2.0, -2.0, -1.0]);
    }

    #[test]
    fn crop_center_keeps_center_voxel() {
        let v = Volume::from_fn(Shape3::cube(8), |z, y, x| (z * 100 + y * 10 + x) as f64);
        let c = v.crop_center(Shape3::cube(4)).unwrap();
        assert_eq!(c.get(2, 2, 2), v.get(4, 4, 4));
    }

    #[test]
    fn invalid_volumes_are_rejected() {
        assert!(Volume::<f64>::from_vec(Shape3::cube(2), vec![0.0; 7], 1.0).is_err());
        assert!(Volume::<f64>::from_vec(Shape3::cube(1), vec![f64::NAN], 1.0).is_err());
        assert!(Volume::<f64>::from_vec(Shape3::cube(1), vec![0.0], 0.0).is_err());
    }
}
