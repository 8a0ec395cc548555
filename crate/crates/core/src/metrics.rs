//! Reconstruction quality: correlation coefficients, Fourier shell
//! correlation and resolution estimates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::EulerAngles;
use crate::scalar::Real;
use crate::sim::ParticleSet;
use crate::volume::{fft_freq, Fft3, Shape3, Volume};
use crate::wedge::{apply_wedge, wedge_mask, WedgeMask};

/// Default FSC threshold.
pub const FSC_THRESHOLD: f64 = 0.143;
/// Shells with fewer voxels than this (inside the region) are invalid.
pub const MIN_SHELL_VOXELS: usize = 8;

/// Pearson correlation of two volumes.
pub fn cc<T: Real>(v: &Volume<T>, w: &Volume<T>) -> Result<f64> {
    v.shape().ensure_same(w.shape())?;
    let (mv, mw) = (v.mean(), w.mean());
    let (mut vw, mut vv, mut ww) = (0.0, 0.0, 0.0);
    for (&a, &b) in v.data().iter().zip(w.data()) {
        let (a, b) = (a.as_f64() - mv, b.as_f64() - mw);
        vw += a * b;
        vv += a * a;
        ww += b * b;
    }
    if vv == 0.0 || ww == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(vw / (vv * ww).sqrt())
}

/// [`cc`] after applying `m` to both volumes.
pub fn masked_cc<T: Real>(v: &Volume<T>, w: &Volume<T>, m: &WedgeMask) -> Result<f64> {
    cc(&apply_wedge(v, m)?, &apply_wedge(w, m)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscCurve {
    /// Integer shell radii `0..=n/2`.
    pub radii: Vec<usize>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub valid: Vec<bool>,
}

/// Fourier shell correlation over shells `round(|k|)`, optionally restricted
/// to the voxels where `region` is 1.
pub fn fsc_curve<T: Real>(v: &Volume<T>, w: &Volume<T>, region: Option<&WedgeMask>) -> Result<FscCurve> {
    let s = v.shape();
    s.ensure_same(w.shape())?;
    if !s.is_cubic() {
        return Err(Error::InvalidConfig("FSC needs cubic volumes".into()));
    }
    if let Some(m) = region {
        s.ensure_same(m.shape())?;
    }
    let n = s.d;
    let shells = n / 2 + 1;
    let fft = Fft3::new(s);
    let (fv, fw) = (fft.forward(v), fft.forward(w));
    let mut num = vec![0.0f64; shells];
    let mut ev = vec![0.0f64; shells];
    let mut ew = vec![0.0f64; shells];
    let mut counts = vec![0usize; shells];
    for z in 0..n {
        let kz = fft_freq(z, n);
        for y in 0..n {
            let ky = fft_freq(y, n);
            for x in 0..n {
                let i = s.index(z, y, x);
                if region.is_some_and(|m| m.data()[i] == 0) {
                    continue;
                }
                let kx = fft_freq(x, n);
                let r = (kz * kz + ky * ky + kx * kx).sqrt().round() as usize;
                if r >= shells {
                    continue;
                }
                let (a, b) = (fv.data()[i], fw.data()[i]);
                let (ar, ai, br, bi) = (a.re.as_f64(), a.im.as_f64(), b.re.as_f64(), b.im.as_f64());
                num[r] += ar * br + ai * bi;
                ev[r] += ar * ar + ai * ai;
                ew[r] += br * br + bi * bi;
                counts[r] += 1;
            }
        }
    }
    let mut values = Vec::with_capacity(shells);
    let mut valid = Vec::with_capacity(shells);
    for r in 0..shells {
        let den = (ev[r] * ew[r]).sqrt();
        let ok = den > 0.0 && (r == 0 || counts[r] >= MIN_SHELL_VOXELS);
        valid.push(ok);
        values.push(if den > 0.0 { num[r] / den } else { 0.0 });
    }
    Ok(FscCurve {
        radii: (0..shells).collect(),
        values,
        counts,
        valid,
    })
}

/// Resolution in Angstrom at the first crossing of `threshold`, linearly
/// interpolated between adjacent valid shells; Nyquist (`2 * voxel_size`)
/// when the curve never drops below the threshold. Invalid shells are
/// skipped; a curve without any valid shell beyond the origin is an error.
pub fn fsc_resolution(c: &FscCurve, threshold: f64, voxel_size: f64, box_size: usize) -> Result<f64> {
    if !c.valid.iter().skip(1).any(|&v| v) {
        return Err(Error::InvalidConfig("FSC curve has no valid shell".into()));
    }
    let mut prev: Option<(usize, f64)> = None;
    for r in 1..c.values.len() {
        if !c.valid[r] {
            continue;
        }
        let v = c.values[r];
        if v < threshold {
            let cross = match prev {
                Some((rp, vp)) => rp as f64 + (vp - threshold) / (vp - v) * (r - rp) as f64,
                None => r as f64,
            };
            return Ok(box_size as f64 * voxel_size / cross);
        }
        prev = Some((r, v));
    }
    Ok(2.0 * voxel_size)
}

/// Mean 0.143-FSC resolution over cubes of side `cube` centered on every
/// particle. Cubes that would leave the volume are shifted inside it.
pub fn particle_fsc<T: Real>(
    tomo: &Volume<T>,
    gt: &Volume<T>,
    particles: &ParticleSet,
    cube: usize,
    region: Option<&WedgeMask>,
) -> Result<f64> {
    tomo.shape().ensure_same(gt.shape())?;
    if particles.is_empty() {
        return Err(Error::Empty("particle set"));
    }
    let s = tomo.shape();
    if cube > s.d.min(s.h).min(s.w) {
        return Err(Error::InvalidConfig("particle cube larger than the volume".into()));
    }
    let size = Shape3::cube(cube);
    let mut total = 0.0;
    for p in &particles.particles {
        let corner = |c: f64, n: usize| ((c.round() as isize - (cube / 2) as isize).max(0) as usize).min(n - cube);
        let at = [corner(p.center[0], s.d), corner(p.center[1], s.h), corner(p.center[2], s.w)];
        let curve = fsc_curve(&tomo.crop(at, size)?, &gt.crop(at, size)?, region)?;
        total += fsc_resolution(&curve, FSC_THRESHOLD, tomo.voxel_size(), cube)?;
    }
    Ok(total / particles.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cc: f64,
    pub cc_outside_wedge: f64,
    pub cc_in_wedge: f64,
    pub fsc_resolution: f64,
    pub fsc_resolution_in_wedge: f64,
}

/// Compares `tomo` with the ground truth. `alpha_max` fixes the wedge used
/// for the restricted scores; with particles the resolutions are per-particle
/// averages over cubes of side `particle_cube`, otherwise whole-volume.
pub fn evaluate<T: Real>(
    tomo: &Volume<T>,
    gt: &Volume<T>,
    alpha_max: f64,
    particles: Option<&ParticleSet>,
    particle_cube: usize,
) -> Result<MetricsReport> {
    let m = wedge_mask(tomo.shape(), alpha_max, EulerAngles::IDENTITY)?;
    let mc = m.complement();
    let (fsc_resolution, fsc_resolution_in_wedge) = match particles {
        Some(p) if !p.is_empty() => {
            let pm = wedge_mask(Shape3::cube(particle_cube), alpha_max, EulerAngles::IDENTITY)?.complement();
            (
                particle_fsc(tomo, gt, p, particle_cube, None)?,
                particle_fsc(tomo, gt, p, particle_cube, Some(&pm))?,
            )
        }
        _ => {
            let n = tomo.side().ok_or_else(|| Error::InvalidConfig("FSC needs cubic volumes".into()))?;
            let vs = tomo.voxel_size();
            (
                fsc_resolution(&fsc_curve(tomo, gt, None)?, FSC_THRESHOLD, vs, n)?,
                fsc_resolution(&fsc_curve(tomo, gt, Some(&mc))?, FSC_THRESHOLD, vs, n)?,
            )
        }
    };
    Ok(MetricsReport {
        cc: cc(tomo, gt)?,
        cc_outside_wedge: masked_cc(tomo, gt, &m)?,
        cc_in_wedge: masked_cc(tomo, gt, &mc)?,
        fsc_resolution,
        fsc_resolution_in_wedge,
    })
}

impl MetricsReport {
    pub fn write_json(&self, out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "cc,cc_outside_wedge,cc_in_wedge,fsc_resolution,fsc_resolution_in_wedge")?;
        writeln!(
            out,
            "{},{},{},{},{}",
            self.cc, self.cc_outside_wedge, self.cc_in_wedge, self.fsc_resolution, self.fsc_resolution_in_wedge
        )?;
        Ok(())
    }
}
