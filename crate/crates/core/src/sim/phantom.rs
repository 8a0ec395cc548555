//! Synthetic density phantoms: soft-edged particles, vesicle membranes and
//! gold fiducials placed inside the region every tilt sees completely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{center, sample_rotation, EulerAngles};
use crate::scalar::Real;
use crate::volume::{Shape3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleKind {
    Sphere,
    Ellipsoid,
    Shell,
    Rod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: Shape3,
    /// Angstrom per voxel.
    pub voxel_size: f64,
    pub particle_count: usize,
    pub particle_kinds: Vec<ParticleKind>,
    /// Outer radius range in voxels.
    pub radius_range: (f64, f64),
    pub membrane_count: usize,
    pub fiducial_count: usize,
    pub density_range: (f64, f64),
    /// Width of the tanh edge profile in voxels.
    pub edge_width: f64,
    /// Distance in voxels kept free between objects and the support boundary.
    pub margin: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: Shape3::cube(64),
            voxel_size: 10.0,
            particle_count: 12,
            particle_kinds: vec![ParticleKind::Sphere, ParticleKind::Ellipsoid, ParticleKind::Shell, ParticleKind::Rod],
            radius_range: (4.0, 8.0),
            membrane_count: 1,
            fiducial_count: 3,
            density_range: (0.5, 1.0),
            edge_width: 1.0,
            margin: 3.0,
        }
    }
}

/// One placed particle; `center` is `(z, y, x)` in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub center: [f64; 3],
    pub radius: f64,
    pub kind: ParticleKind,
    pub density: f64,
    pub orientation: EulerAngles,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

const FIDUCIAL_RADIUS: f64 = 2.0;
const MEMBRANE_THICKNESS: f64 = 2.0;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        if s.is_empty() || s.d != s.w {
            return Err(Error::InvalidConfig("phantom needs equal z and x extents".into()));
        }
        let (rmin, rmax) = self.radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::InvalidConfig(format!("bad radius range {:?}", self.radius_range)));
        }
        if self.particle_count > 0 && self.particle_kinds.is_empty() {
            return Err(Error::InvalidConfig("particle_kinds is empty".into()));
        }
        if self.density_range.0 > self.density_range.1 || !(self.edge_width > 0.0) || self.margin < 0.0 {
            return Err(Error::InvalidConfig("bad density range, edge width or margin".into()));
        }
        let (rc, ry) = self.support();
        let largest = if self.particle_count > 0 { rmax } else { 0.0 }.max(if self.fiducial_count > 0 {
            FIDUCIAL_RADIUS
        } else {
            0.0
        });
        if largest > rc.min(ry) {
            return Err(Error::InvalidConfig(format!(
                "objects of radius {largest} do not fit a {}x{}x{} volume",
                s.d, s.h, s.w
            )));
        }
        if self.membrane_count > 0 && rc.min(ry) < 4.0 + MEMBRANE_THICKNESS {
            return Err(Error::InvalidConfig("volume too small for a membrane".into()));
        }
        Ok(())
    }

    /// Radii of the support: cylinder about `y` in the x-z plane, slab in `y`.
    fn support(&self) -> (f64, f64) {
        let s = self.shape;
        let rc = (s.d.min(s.w) as f64) / 2.0 - self.margin - 2.0 * self.edge_width;
        let ry = s.h as f64 / 2.0 - self.margin - 2.0 * self.edge_width;
        (rc, ry)
    }
}

/// Renders a phantom. Objects never leave the cylinder inscribed in the
/// x-z square, so projections at any tilt see all of them.
pub fn make_phantom<T: Real>(cfg: &PhantomConfig, seed: u64) -> Result<(Volume<T>, ParticleSet)> {
    cfg.validate()?;
    let s = cfg.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; s.len()];
    let (rc, ry) = cfg.support();
    let c = [center(s.d), center(s.h), center(s.w)];
    let mut placed: Vec<([f64; 3], f64)> = Vec::new();

    let place = |rng: &mut ChaCha8Rng, extent: f64, placed: &mut Vec<([f64; 3], f64)>| {
        let mut best = None;
        for _ in 0..200 {
            let r = (rc - extent) * rng.random::<f64>().sqrt();
            let t = rng.random::<f64>() * std::f64::consts::TAU;
            let p = [
                c[0] + r * t.sin(),
                c[1] + (ry - extent) * rng.random_range(-1.0..=1.0),
                c[2] + r * t.cos(),
            ];
            best = Some(p);
            if placed.iter().all(|(q, e)| dist(&p, q) >= e + extent + 1.0) {
                break;
            }
        }
        let p = best.expect("at least one candidate");
        placed.push((p, extent));
        p
    };

    for _ in 0..cfg.membrane_count {
        let hi = (0.35 * rc.min(ry)).max(4.0);
        let radius = rng.random_range(4.0..=hi);
        let p = place(&mut rng, radius + MEMBRANE_THICKNESS, &mut placed);
        let density = cfg.density_range.1;
        let inner = radius - MEMBRANE_THICKNESS / 2.0;
        splat(&mut acc, s, p, radius + MEMBRANE_THICKNESS, cfg.edge_width, density, |q| {
            (norm(q) - inner).abs() - MEMBRANE_THICKNESS / 2.0
        });
    }

    let mut particles = Vec::with_capacity(cfg.particle_count);
    for _ in 0..cfg.particle_count {
        let kind = cfg.particle_kinds[rng.random_range(0..cfg.particle_kinds.len())];
        let radius = rng.random_range(cfg.radius_range.0..=cfg.radius_range.1);
        let density = rng.random_range(cfg.density_range.0..=cfg.density_range.1);
        let orientation = sample_rotation(&mut rng);
        let p = place(&mut rng, radius, &mut placed);
        let local = orientation.matrix().transpose();
        splat(&mut acc, s, p, radius, cfg.edge_width, density, |q| sdf(kind, radius, local.apply(q)));
        particles.push(Particle {
            center: p,
            radius,
            kind,
            density,
            orientation,
        });
    }

    for _ in 0..cfg.fiducial_count {
        let p = place(&mut rng, FIDUCIAL_RADIUS, &mut placed);
        let density = 3.0 * cfg.density_range.1;
        splat(&mut acc, s, p, FIDUCIAL_RADIUS, cfg.edge_width, density, |q| norm(q) - FIDUCIAL_RADIUS);
    }

    let data = acc.into_iter().map(T::of).collect();
    let v = Volume::from_vec(s, data, cfg.voxel_size)?;
    Ok((v, ParticleSet { particles }))
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn norm(q: [f64; 3]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
}

/// Signed distance (approximate for ellipsoids) in the particle frame;
/// `q` is `(x, y, z)`.
fn sdf(kind: ParticleKind, r: f64, q: [f64; 3]) -> f64 {
    match kind {
        ParticleKind::Sphere => norm(q) - r,
        ParticleKind::Ellipsoid => {
            let a = [r, 0.65 * r, 0.4 * r];
            let k = norm([q[0] / a[0], q[1] / a[1], q[2] / a[2]]);
            (k - 1.0) * a[2]
        }
        ParticleKind::Shell => {
            let t = (0.25 * r).max(1.5);
            (norm(q) - (r - t / 2.0)).abs() - t / 2.0
        }
        ParticleKind::Rod => {
            let (half, rad) = (0.7 * r, 0.3 * r);
            let z = q[2].clamp(-half, half);
            norm([q[0], q[1], q[2] - z]) - rad
        }
    }
}

/// Adds `density * profile(sdf)` over the bounding box of an object at
/// `p = (z, y, x)`.
fn splat(acc: &mut [f64], s: Shape3, p: [f64; 3], extent: f64, w: f64, density: f64, f: impl Fn([f64; 3]) -> f64) {
    let reach = extent + 4.0 * w;
    let range = |c: f64, n: usize| {
        let lo = (c - reach).floor().max(0.0) as usize;
        let hi = ((c + reach).ceil() as usize).min(n - 1);
        lo..=hi
    };
    for z in range(p[0], s.d) {
        for y in range(p[1], s.h) {
            for x in range(p[2], s.w) {
                let q = [x as f64 - p[2], y as f64 - p[1], z as f64 - p[0]];
                let d = f(q);
                acc[s.index(z, y, x)] += density * 0.5 * (1.0 - (d / w).tanh());
            }
        }
    }
}
