//! Layer kernels on channel-major buffers (`[channel][z][y][x]`).
//!
//! Convolutions lower to GEMM through an explicit column buffer; the column
//! buffer is rebuilt in the backward pass instead of being stored.

use crate::scalar::Real;
use crate::volume::Shape3;

pub(crate) const LEAKY_SLOPE: f64 = 0.1;

/// Column buffer for a `k`-cubed, stride-1, "same"-padded convolution.
/// Rows are `(ci, kz, ky, kx)`, columns are output voxels.
fn im2col<T: Real>(x: &[T], cin: usize, s: Shape3, k: usize, zs: (usize, usize), cols: &mut [T]) {
    let v = s.len();
    let cv = (zs.1 - zs.0) * s.h * s.w;
    let pad = (k / 2) as isize;
    debug_assert_eq!(cols.len(), cin * k * k * k * cv);
    let mut row = 0;
    for ci in 0..cin {
        let src = &x[ci * v..(ci + 1) * v];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * cv..(row + 1) * cv];
                    row += 1;
                    let (oz, oy, ox) = (kz as isize - pad, ky as isize - pad, kx as isize - pad);
                    for z in zs.0..zs.1 {
                        let sz = z as isize + oz;
                        for y in 0..s.h {
                            let sy = y as isize + oy;
                            let o = ((z - zs.0) * s.h + y) * s.w;
                            let d = &mut dst[o..o + s.w];
                            if sz < 0 || sz >= s.d as isize || sy < 0 || sy >= s.h as isize {
                                d.fill(T::zero());
                                continue;
                            }
                            let srow = &src[(sz as usize * s.h + sy as usize) * s.w..][..s.w];
                            shift_copy(d, srow, ox);
                        }
                    }
                }
            }
        }
    }
}

/// `d[x] = s[x + off]` with zero fill outside.
#[inline]
fn shift_copy<T: Real>(d: &mut [T], s: &[T], off: isize) {
    let w = d.len();
    let a = off.unsigned_abs().min(w);
    if off >= 0 {
        d[..w - a].copy_from_slice(&s[a..]);
        d[w - a..].fill(T::zero());
    } else {
        d[..a].fill(T::zero());
        d[a..].copy_from_slice(&s[..w - a]);
    }
}

/// `d[x + off] += s[x]` restricted to valid indices (adjoint of `shift_copy`).
#[inline]
fn shift_add<T: Real>(d: &mut [T], s: &[T], off: isize) {
    let w = d.len();
    let a = off.unsigned_abs().min(w);
    if off >= 0 {
        for (dv, &sv) in d[a..].iter_mut().zip(&s[..w - a]) {
            *dv = *dv + sv;
        }
    } else {
        for (dv, &sv) in d[..w - a].iter_mut().zip(&s[a..]) {
            *dv = *dv + sv;
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], cin: usize, s: Shape3, k: usize, zs: (usize, usize), dx: &mut [T]) {
    let v = s.len();
    let cv = (zs.1 - zs.0) * s.h * s.w;
    let pad = (k / 2) as isize;
    let mut row = 0;
    for ci in 0..cin {
        let dst = &mut dx[ci * v..(ci + 1) * v];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * cv..(row + 1) * cv];
                    row += 1;
                    let (oz, oy, ox) = (kz as isize - pad, ky as isize - pad, kx as isize - pad);
                    for z in zs.0..zs.1 {
                        let sz = z as isize + oz;
                        if sz < 0 || sz >= s.d as isize {
                            continue;
                        }
                        for y in 0..s.h {
                            let sy = y as isize + oy;
                            if sy < 0 || sy >= s.h as isize {
                                continue;
                            }
                            let c = &src[((z - zs.0) * s.h + y) * s.w..][..s.w];
                            let d = &mut dst[(sz as usize * s.h + sy as usize) * s.w..][..s.w];
                            // c[x] came from d[x + ox]
                            shift_add(d, c, ox);
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with a `k`-cubed kernel (`k` odd).
/// Weights are `[cout][cin][kz][ky][kx]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    cin: usize,
    s: Shape3,
    w: &[T],
    b: &[T],
    cout: usize,
    k: usize,
) -> Vec<T> {
    let v = s.len();
    let kk = cin * k * k * k;
    let mut y = vec![T::zero(); cout * v];
    for (co, chunk) in y.chunks_mut(v).enumerate() {
        chunk.fill(b[co]);
    }
    if k == 1 {
        T::gemm(cout, cin, v, T::one(), w, (cin as isize, 1), x, (v as isize, 1), T::one(), &mut y, (v as isize, 1));
    } else {
        let mut cols = Vec::new();
        for zs in slabs(s, kk) {
            let plane = s.h * s.w;
            let cv = (zs.1 - zs.0) * plane;
            cols.resize(kk * cv, T::zero());
            im2col(x, cin, s, k, zs, &mut cols);
            T::gemm(
                cout,
                kk,
                cv,
                T::one(),
                w,
                (kk as isize, 1),
                &cols,
                (cv as isize, 1),
                T::one(),
                &mut y[zs.0 * plane..],
                (v as isize, 1),
            );
        }
    }
    y
}

/// Splits the z axis into slabs whose column buffer stays around 1 MiB.
fn slabs(s: Shape3, rows: usize) -> impl Iterator<Item = (usize, usize)> {
    const TARGET: usize = 1 << 18;
    let plane = s.h * s.w;
    let per = (TARGET / (rows * plane).max(1)).clamp(1, s.d);
    (0..s.d).step_by(per).map(move |z| (z, (z + per).min(s.d)))
}

/// Accumulates weight/bias gradients into `dw`, `db`; returns the input
/// gradient if requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    cin: usize,
    s: Shape3,
    w: &[T],
    cout: usize,
    k: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let v = s.len();
    let kk = cin * k * k * k;
    for (co, chunk) in dy.chunks(v).enumerate() {
        db[co] = db[co] + chunk.iter().copied().sum::<T>();
    }
    if k == 1 {
        T::gemm(cout, v, cin, T::one(), dy, (v as isize, 1), x, (1, v as isize), T::one(), dw, (cin as isize, 1));
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); cin * v];
        T::gemm(cin, cout, v, T::one(), w, (1, cin as isize), dy, (v as isize, 1), T::zero(), &mut dx, (v as isize, 1));
        return Some(dx);
    }
    let plane = s.h * s.w;
    let mut cols = Vec::new();
    let mut dx = need_dx.then(|| vec![T::zero(); cin * v]);
    for zs in slabs(s, kk) {
        let cv = (zs.1 - zs.0) * plane;
        cols.resize(kk * cv, T::zero());
        im2col(x, cin, s, k, zs, &mut cols);
        let dys = &dy[zs.0 * plane..];
        T::gemm(cout, cv, kk, T::one(), dys, (v as isize, 1), &cols, (1, cv as isize), T::one(), dw, (kk as isize, 1));
        if let Some(dx) = dx.as_mut() {
            T::gemm(kk, cout, cv, T::one(), w, (1, kk as isize), dys, (v as isize, 1), T::zero(), &mut cols, (cv as isize, 1));
            col2im(&cols, cin, s, k, zs, dx);
        }
    }
    dx
}

/// 2x2x2 max pooling; returns pooled values and the winning offset per output.
pub(crate) fn maxpool_forward<T: Real>(x: &[T], c: usize, s: Shape3) -> (Vec<T>, Vec<u8>) {
    let o = Shape3::new(s.d / 2, s.h / 2, s.w / 2);
    let (vi, vo) = (s.len(), o.len());
    let mut y = vec![T::zero(); c * vo];
    let mut arg = vec![0u8; c * vo];
    for ch in 0..c {
        let src = &x[ch * vi..(ch + 1) * vi];
        for z in 0..o.d {
            for yy in 0..o.h {
                for xx in 0..o.w {
                    let mut best = T::neg_infinity();
                    let mut bi = 0u8;
                    for off in 0..8u8 {
                        let (a, b, cc) = ((off >> 2) as usize, ((off >> 1) & 1) as usize, (off & 1) as usize);
                        let val = src[s.index(2 * z + a, 2 * yy + b, 2 * xx + cc)];
                        if val > best {
                            best = val;
                            bi = off;
                        }
                    }
                    let oi = ch * vo + o.index(z, yy, xx);
                    y[oi] = best;
                    arg[oi] = bi;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Real>(dy: &[T], arg: &[u8], c: usize, s: Shape3) -> Vec<T> {
    let o = Shape3::new(s.d / 2, s.h / 2, s.w / 2);
    let (vi, vo) = (s.len(), o.len());
    let mut dx = vec![T::zero(); c * vi];
    for ch in 0..c {
        for z in 0..o.d {
            for yy in 0..o.h {
                for xx in 0..o.w {
                    let oi = ch * vo + o.index(z, yy, xx);
                    let off = arg[oi];
                    let (a, b, cc) = ((off >> 2) as usize, ((off >> 1) & 1) as usize, (off & 1) as usize);
                    dx[ch * vi + s.index(2 * z + a, 2 * yy + b, 2 * xx + cc)] = dy[oi];
                }
            }
        }
    }
    dx
}

/// Transposed convolution, kernel 2, stride 2. Weights are
/// `[cout][offset][cin]` with `offset = 4 a + 2 b + c`.
pub(crate) fn upconv_forward<T: Real>(
    x: &[T],
    cin: usize,
    s: Shape3,
    w: &[T],
    b: &[T],
    cout: usize,
) -> Vec<T> {
    let vi = s.len();
    let o = Shape3::new(2 * s.d, 2 * s.h, 2 * s.w);
    let mut tmp = vec![T::zero(); cout * 8 * vi];
    T::gemm(cout * 8, cin, vi, T::one(), w, (cin as isize, 1), x, (vi as isize, 1), T::zero(), &mut tmp, (vi as isize, 1));
    let mut y = vec![T::zero(); cout * o.len()];
    for co in 0..cout {
        let dst = &mut y[co * o.len()..(co + 1) * o.len()];
        for off in 0..8usize {
            let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
            let src = &tmp[(co * 8 + off) * vi..(co * 8 + off + 1) * vi];
            for z in 0..s.d {
                for yy in 0..s.h {
                    let srow = &src[(z * s.h + yy) * s.w..][..s.w];
                    let base = o.index(2 * z + a, 2 * yy + bb, c);
                    for (xx, &val) in srow.iter().enumerate() {
                        dst[base + 2 * xx] = val + b[co];
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn upconv_backward<T: Real>(
    x: &[T],
    cin: usize,
    s: Shape3,
    w: &[T],
    cout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let vi = s.len();
    let o = Shape3::new(2 * s.d, 2 * s.h, 2 * s.w);
    let mut tmp = vec![T::zero(); cout * 8 * vi];
    for co in 0..cout {
        let src = &dy[co * o.len()..(co + 1) * o.len()];
        db[co] = db[co] + src.iter().copied().sum::<T>();
        for off in 0..8usize {
            let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
            let dst = &mut tmp[(co * 8 + off) * vi..(co * 8 + off + 1) * vi];
            for z in 0..s.d {
                for yy in 0..s.h {
                    let base = o.index(2 * z + a, 2 * yy + bb, c);
                    let drow = &mut dst[(z * s.h + yy) * s.w..][..s.w];
                    for (xx, d) in drow.iter_mut().enumerate() {
                        *d = src[base + 2 * xx];
                    }
                }
            }
        }
    }
    T::gemm(cout * 8, vi, cin, T::one(), &tmp, (vi as isize, 1), x, (1, vi as isize), T::one(), dw, (cin as isize, 1));
    let mut dx = vec![T::zero(); cin * vi];
    T::gemm(cin, cout * 8, vi, T::one(), w, (1, cin as isize), &tmp, (vi as isize, 1), T::zero(), &mut dx, (vi as isize, 1));
    dx
}

pub(crate) fn leaky_forward<T: Real>(x: &mut [T]) {
    let slope = T::of(LEAKY_SLOPE);
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
}

/// Uses the activation output: its sign equals the input sign.
pub(crate) fn leaky_backward<T: Real>(y: &[T], dy: &mut [T]) {
    let slope = T::of(LEAKY_SLOPE);
    for (d, &v) in dy.iter_mut().zip(y) {
        if v < T::zero() {
            *d = *d * slope;
        }
    }
}
