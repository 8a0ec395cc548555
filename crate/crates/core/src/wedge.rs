//! Analytic missing-wedge masks in the Fourier domain.
//!
//! Geometry: the beam runs along `z` and the tilt axis along `y`. A tilt
//! series limited to `+-alpha_max` samples the frequencies with
//! `|k_z| <= tan(alpha_max) * |k_x|`; everything else around the `k_z` axis is
//! the missing wedge. A rotated mask is evaluated by rotating each frequency
//! back into the canonical frame, never by resampling a binary grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{EulerAngles, Rotation};
use crate::scalar::Real;
use crate::volume::{fft_freq, is_nyquist, Fft3, Shape3, Volume};

/// Binary Fourier mask of a limited tilt range, possibly rotated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WedgeMask {
    alpha_max: f64,
    orientation: EulerAngles,
    shape: Shape3,
    complement: bool,
    data: Vec<u8>,
}

/// `true` if the canonical-frame frequency `(kx, ky, kz)` lies in the
/// sampled region of a `+-alpha_max` tilt range.
#[inline]
pub fn canonical_keeps(alpha_max_deg: f64, k: [f64; 3]) -> bool {
    if alpha_max_deg >= 90.0 {
        return true;
    }
    let t = alpha_max_deg.to_radians().tan();
    let scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    k[2].abs() <= t * k[0].abs() + 1e-12 * scale
}

/// Builds the wedge mask for `shape`, tilt range `+-alpha_max` (degrees)
/// and orientation `phi`.
///
/// On even axes the Nyquist bin stands for both `+N/2` and `-N/2`; such bins
/// are kept only if every sign choice is kept, which keeps the mask centrally
/// symmetric so masked real volumes stay real.
pub fn wedge_mask(shape: Shape3, alpha_max: f64, orientation: EulerAngles) -> Result<WedgeMask> {
    if !(alpha_max > 0.0 && alpha_max <= 90.0) {
        return Err(Error::InvalidConfig(format!("alpha_max must lie in (0, 90], got {alpha_max}")));
    }
    let to_canonical: Rotation = orientation.matrix().transpose();
    let identity = orientation.is_identity();
    let mut data = Vec::with_capacity(shape.len());
    for iz in 0..shape.d {
        let kz = fft_freq(iz, shape.d) / shape.d as f64;
        let nz = is_nyquist(iz, shape.d);
        for iy in 0..shape.h {
            let ky = fft_freq(iy, shape.h) / shape.h as f64;
            let ny = is_nyquist(iy, shape.h);
            for ix in 0..shape.w {
                let kx = fft_freq(ix, shape.w) / shape.w as f64;
                let nx = is_nyquist(ix, shape.w);
                let mut keep = true;
                'signs: for sz in if nz { &[1.0, -1.0][..] } else { &[1.0][..] } {
                    for sy in if ny { &[1.0, -1.0][..] } else { &[1.0][..] } {
                        for sx in if nx { &[1.0, -1.0][..] } else { &[1.0][..] } {
                            let k = [kx * sx, ky * sy, kz * sz];
                            let k = if identity { k } else { to_canonical.apply(k) };
                            if !canonical_keeps(alpha_max, k) {
                                keep = false;
                                break 'signs;
                            }
                        }
                    }
                }
                data.push(keep as u8);
            }
        }
    }
    Ok(WedgeMask {
        alpha_max,
        orientation,
        shape,
        complement: false,
        data,
    })
}

impl WedgeMask {
    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    pub fn orientation(&self) -> EulerAngles {
        self.orientation
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn is_complement(&self) -> bool {
        self.complement
    }

    /// Mask entries in `{0, 1}`, same layout as [`Volume`].
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.shape.index(z, y, x)]
    }

    /// `I - M`.
    pub fn complement(&self) -> WedgeMask {
        WedgeMask {
            complement: !self.complement,
            data: self.data.iter().map(|&b| 1 - b).collect(),
            ..self.clone()
        }
    }

    pub fn kept_count(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.data.len() as f64
    }
}

/// Multiplies the spectrum of `v` by the mask: `F^-1(M . F v)`.
pub fn apply_wedge<T: Real>(v: &Volume<T>, m: &WedgeMask) -> Result<Volume<T>> {
    v.shape().ensure_same(m.shape())?;
    apply_wedge_with(&Fft3::new(v.shape()), v, m)
}

/// [`apply_wedge`] with a pre-planned transform.
pub fn apply_wedge_with<T: Real>(fft: &Fft3<T>, v: &Volume<T>, m: &WedgeMask) -> Result<Volume<T>> {
    v.shape().ensure_same(m.shape())?;
    let mut s = fft.forward(v);
    for (c, &k) in s.data_mut().iter_mut().zip(m.data()) {
        if k == 0 {
            *c = num_complex::Complex::new(T::zero(), T::zero());
        }
    }
    fft.inverse(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_degrees_keeps_everything() {
        let m = wedge_mask(Shape3::cube(8), 90.0, EulerAngles::new(0.4, 1.0, 2.0)).unwrap();
        assert_eq!(m.kept_count(), 512);
    }

    #[test]
    fn canonical_geometry() {
        assert!(canonical_keeps(60.0, [1.0, 0.0, 0.0]));
        assert!(!canonical_keeps(60.0, [0.0, 0.0, 1.0]));
        // the tilt-axis line is always measured
        assert!(canonical_keeps(10.0, [0.0, 5.0, 0.0]));
        let m = wedge_mask(Shape3::cube(8), 60.0, EulerAngles::IDENTITY).unwrap();
        assert_eq!(m.get(0, 0, 1), 1);
        assert_eq!(m.get(1, 0, 0), 0);
        assert_eq!(m.get(0, 0, 0), 1);
    }

    #[test]
    fn invalid_angle_rejected() {
        assert!(wedge_mask(Shape3::cube(4), 0.0, EulerAngles::IDENTITY).is_err());
        assert!(wedge_mask(Shape3::cube(4), 91.0, EulerAngles::IDENTITY).is_err());
    }

    #[test]
    fn complement_partitions() {
        let m = wedge_mask(Shape3::cube(8), 45.0, EulerAngles::new(0.1, 0.2, 0.3)).unwrap();
        let c = m.complement();
        assert!(m.data().iter().zip(c.data()).all(|(a, b)| a + b == 1));
        assert!(c.is_complement());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let m = wedge_mask(Shape3::cube(4), 60.0, EulerAngles::IDENTITY).unwrap();
        let v = Volume::<f64>::zeros(Shape3::cube(5));
        assert!(matches!(apply_wedge(&v, &m), Err(Error::ShapeMismatch { .. })));
    }
}
