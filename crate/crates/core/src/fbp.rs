//! Parallel-beam filtered back-projection.
//!
//! Rows of every projection run perpendicular to the tilt axis and are
//! filtered with the band-limited ramp (Ram-Lak) built from its spatial
//! kernel on a zero-padded grid, optionally tapered by a Hamming window. The
//! filtered rows are smeared back along the beam direction with linear
//! interpolation on the detector. With the `pi / K` weight a full `180`
//! degree series approximately inverts the projector.

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rotation::center;
use crate::scalar::Real;
use crate::sim::TiltSeries;
use crate::volume::{fft_freq, Shape3, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    #[default]
    Ramp,
    /// Ramp times `0.54 + 0.46 cos(2 pi f)`, `f` in cycles per pixel.
    Hamming,
}

/// Frequency response of the filter on a padded grid of length `p`.
fn filter_response(kind: FilterKind, p: usize) -> Vec<f64> {
    let mut h = vec![Complex::new(0.0f64, 0.0); p];
    h[0].re = 0.25;
    for n in (1..p / 2).step_by(2) {
        let v = -1.0 / (std::f64::consts::PI * n as f64).powi(2);
        h[n].re = v;
        h[p - n].re = v;
    }
    FftPlanner::new().plan_fft_forward(p).process(&mut h);
    (0..p)
        .map(|i| {
            let ramp = h[i].re;
            match kind {
                FilterKind::Ramp => ramp,
                FilterKind::Hamming => {
                    let f = fft_freq(i, p) / p as f64;
                    ramp * (0.54 + 0.46 * (std::f64::consts::TAU * f).cos())
                }
            }
        })
        .collect()
}

/// Filters every row of every projection.
pub fn filter_projections<T: Real>(t: &TiltSeries<T>, kind: FilterKind) -> Vec<Image<f64>> {
    let (h, w) = t.image_shape();
    let p = (2 * w).next_power_of_two();
    let resp = filter_response(kind, p);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(p);
    let inv = planner.plan_fft_inverse(p);
    t.projections()
        .par_iter()
        .map(|proj| {
            let mut out = Vec::with_capacity(h * w);
            let mut buf = vec![Complex::new(0.0, 0.0); p];
            for y in 0..h {
                buf.fill(Complex::new(0.0, 0.0));
                for (b, v) in buf.iter_mut().zip(proj.data.row(y)) {
                    b.re = v.as_f64();
                }
                fwd.process(&mut buf);
                for (b, r) in buf.iter_mut().zip(&resp) {
                    *b *= *r / p as f64;
                }
                inv.process(&mut buf);
                out.extend(buf[..w].iter().map(|c| c.re));
            }
            Image::from_vec(h, w, out).expect("row-major filtered image")
        })
        .collect()
}

/// Smears (already filtered) images back into a volume of `out_shape`.
///
/// Voxel `(z, y, x)` reads detector column
/// `u = c_u + cos(theta) (x - c_x) - sin(theta) (z - c_z)` of row
/// `y - c_y + c_v`; readings off the detector count as zero.
pub fn backproject(images: &[Image<f64>], angles: &[f64], out_shape: Shape3) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Empty("tilt series"));
    }
    if out_shape.is_empty() {
        return Err(Error::InvalidConfig("output shape must be non-empty".into()));
    }
    let (h, w) = images[0].shape();
    let trig: Vec<(f64, f64)> = angles.iter().map(|a| a.to_radians().sin_cos()).collect();
    let (cz, cy, cx) = (center(out_shape.d), center(out_shape.h), center(out_shape.w));
    let (cv, cu) = (center(h) as isize, center(w));
    let scale = std::f64::consts::PI / images.len() as f64;
    let plane = out_shape.h * out_shape.w;
    let mut out = vec![0.0f64; out_shape.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        let dz = z as f64 - cz;
        for (img, &(sn, cs)) in images.iter().zip(&trig) {
            for x in 0..out_shape.w {
                let u = cu + cs * (x as f64 - cx) - sn * dz;
                let u0 = u.floor();
                let f = u - u0;
                let u0 = u0 as isize;
                let taps = [(u0, 1.0 - f), (u0 + 1, f)];
                for y in 0..out_shape.h {
                    let row = y as isize - cy as isize + cv;
                    if row < 0 || row >= h as isize {
                        continue;
                    }
                    let r = img.row(row as usize);
                    let mut acc = 0.0;
                    for (ui, wt) in taps {
                        if wt != 0.0 && ui >= 0 && (ui as usize) < w {
                            acc += wt * r[ui as usize];
                        }
                    }
                    slab[y * out_shape.w + x] += acc;
                }
            }
        }
        for v in slab.iter_mut() {
            *v *= scale;
        }
    });
    Ok(out)
}

/// Filtered back-projection of `t` onto a grid of `out_shape`.
pub fn fbp<T: Real>(t: &TiltSeries<T>, filter: FilterKind, out_shape: Shape3) -> Result<Volume<T>> {
    if t.is_empty() {
        return Err(Error::Empty("tilt series"));
    }
    let filtered = filter_projections(t, filter);
    let out = backproject(&filtered, &t.angles(), out_shape)?;
    Volume::from_vec(out_shape, out.into_iter().map(T::of).collect(), t.pixel_size())
}
