//! Rigid 3D rotations: ZYZ Euler angles, Haar-uniform sampling, and
//! trilinear volume rotation about the grid center.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::volume::Volume;

/// Intrinsic ZYZ Euler angles in radians: `R = Rz(alpha) * Ry(beta) * Rz(gamma)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerAngles {
    pub const IDENTITY: Self = Self {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn matrix(&self) -> Rotation {
        Rotation::about_z(self.alpha)
            .then_after(&Rotation::about_y(self.beta))
            .then_after(&Rotation::about_z(self.gamma))
    }

    /// Angles of the inverse rotation.
    pub fn inverse(&self) -> Self {
        Self::new(-self.gamma, -self.beta, -self.alpha)
    }

    /// Recovers ZYZ angles from a rotation matrix.
    pub fn from_matrix(r: &Rotation) -> Self {
        let m = &r.0;
        let beta = m[2][2].clamp(-1.0, 1.0).acos();
        let sb = beta.sin();
        if sb > 1e-9 {
            Self::new(m[1][2].atan2(m[0][2]), beta, m[2][1].atan2(-m[2][0]))
        } else if m[2][2] > 0.0 {
            Self::new(m[1][0].atan2(m[0][0]), 0.0, 0.0)
        } else {
            Self::new((-m[1][0]).atan2(-m[0][0]), std::f64::consts::PI, 0.0)
        }
    }
}

/// 3x3 rotation matrix acting on `(x, y, z)` column vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn about_z(t: f64) -> Self {
        let (s, c) = t.sin_cos();
        Self([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn about_y(t: f64) -> Self {
        let (s, c) = t.sin_cos();
        Self([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn about_x(t: f64) -> Self {
        let (s, c) = t.sin_cos();
        Self([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    /// Matrix product `self * rhs` (apply `rhs` first).
    pub fn then_after(&self, rhs: &Rotation) -> Rotation {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Rotation(out)
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.0;
        Rotation([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    #[inline]
    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Rotation from a unit quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4]) -> Rotation {
        let [w, x, y, z] = q;
        Rotation([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }
}

/// Draws a Haar-uniform rotation (uniform unit quaternion) as ZYZ angles.
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> EulerAngles {
    use std::f64::consts::TAU;
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [b * (TAU * u3).cos(), a * (TAU * u2).sin(), a * (TAU * u2).cos(), b * (TAU * u3).sin()];
    EulerAngles::from_matrix(&Rotation::from_quaternion(q))
}

/// Rotation center of an axis of length `n`, shared with the Fourier origin
/// convention.
#[inline]
pub fn center(n: usize) -> f64 {
    (n / 2) as f64
}

/// Trilinear sample at fractional `(z, y, x)`; points outside the grid read 0.
#[inline]
pub(crate) fn trilinear<T: Real>(v: &Volume<T>, z: f64, y: f64, x: f64) -> f64 {
    let s = v.shape();
    let (z0, y0, x0) = (z.floor(), y.floor(), x.floor());
    if z0 < -1.0 || y0 < -1.0 || x0 < -1.0 || z0 >= s.d as f64 || y0 >= s.h as f64 || x0 >= s.w as f64 {
        return 0.0;
    }
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let (z0, y0, x0) = (z0 as isize, y0 as isize, x0 as isize);
    let data = v.data();
    let mut acc = 0.0;
    for (dz, wz) in [(0isize, 1.0 - fz), (1, fz)] {
        let zi = z0 + dz;
        if wz == 0.0 || zi < 0 || zi >= s.d as isize {
            continue;
        }
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            let yi = y0 + dy;
            if wy == 0.0 || yi < 0 || yi >= s.h as isize {
                continue;
            }
            let row = (zi as usize * s.h + yi as usize) * s.w;
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let xi = x0 + dx;
                if wx == 0.0 || xi < 0 || xi >= s.w as isize {
                    continue;
                }
                acc += wz * wy * wx * data[row + xi as usize].as_f64();
            }
        }
    }
    acc
}

/// Rotates a volume about its grid center `(n/2, n/2, n/2)` with trilinear
/// interpolation. Output voxel `p` reads the input at `R^T (p - c) + c`;
/// samples outside the source grid are zero.
pub fn rotate_volume<T: Real>(v: &Volume<T>, phi: &EulerAngles) -> Volume<T> {
    if phi.is_identity() {
        return v.clone();
    }
    rotate_by_matrix(v, &phi.matrix())
}

pub fn rotate_by_matrix<T: Real>(v: &Volume<T>, r: &Rotation) -> Volume<T> {
    let s = v.shape();
    let inv = r.transpose();
    let (cz, cy, cx) = (center(s.d), center(s.h), center(s.w));
    let mut out = Volume::zeros(s).with_voxel_size(v.voxel_size());
    let data = out.data_mut();
    for z in 0..s.d {
        for y in 0..s.h {
            for x in 0..s.w {
                let [sx, sy, sz] = inv.apply([x as f64 - cx, y as f64 - cy, z as f64 - cz]);
                data[s.index(z, y, x)] = T::of(trilinear(v, sz + cz, sy + cy, sx + cx));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_rotation_is_exact() {
        let v = Volume::from_fn(Shape3::cube(6), |z, y, x| (z * 36 + y * 6 + x) as f64);
        assert_eq!(rotate_volume(&v, &EulerAngles::IDENTITY), v);
        assert_eq!(EulerAngles::IDENTITY.matrix(), Rotation::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z_permutes_axes() {
        let n = 9;
        let c = n / 2;
        let r = 3;
        let mut v = Volume::<f64>::zeros(Shape3::cube(n));
        v.set(c, c, c + r, 1.0); // voxel at x = c + r
        let out = rotate_volume(&v, &EulerAngles::new(FRAC_PI_2, 0.0, 0.0));
        assert!((out.get(c, c + r, c) - 1.0).abs() < 1e-12);
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euler_round_trip_through_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let e = sample_rotation(&mut rng);
            let back = EulerAngles::from_matrix(&e.matrix());
            let (a, b) = (e.matrix().0, back.matrix().0);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a[i][j] - b[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn inverse_angles_give_inverse_matrix() {
        let e = EulerAngles::new(0.3, 1.1, -2.0);
        let p = e.matrix().then_after(&e.inverse().matrix());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((p.0[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let a = sample_rotation(&mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_rotation(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
