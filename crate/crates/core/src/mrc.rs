//! MRC2014 files, 32-bit float little-endian (mode 2) only.
//!
//! Tilt series are image stacks with one section per tilt. Their angles go
//! into a text sidecar `<stem>.tlt` (one value in degrees per line) and
//! frames, if any, into `<stem>.frames.mrc` ordered tilt by tilt.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Real;
use crate::sim::{Projection, TiltScheme, TiltSeries};
use crate::volume::{Shape3, Volume};

const HEADER: usize = 1024;
const MODE_F32: i32 = 2;

/// Raw stack read from disk: `nz` sections of `ny x nx`.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcStack {
    pub shape: Shape3,
    pub voxel_size: f64,
    pub data: Vec<f32>,
}

/// Contents of an MRC file as the pipeline sees it.
#[derive(Clone, Debug)]
pub enum MrcContent<T> {
    Volume(Volume<T>),
    TiltSeries(TiltSeries<T>),
}

fn word(h: &[u8], i: usize) -> [u8; 4] {
    h[4 * i..4 * i + 4].try_into().expect("4-byte slice")
}

fn get_i32(h: &[u8], i: usize) -> i32 {
    i32::from_le_bytes(word(h, i))
}

fn get_f32(h: &[u8], i: usize) -> f32 {
    f32::from_le_bytes(word(h, i))
}

fn put_i32(h: &mut [u8], i: usize, v: i32) {
    h[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], i: usize, v: f32) {
    h[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
}

/// Parses an in-memory MRC file.
pub fn parse_mrc(bytes: &[u8]) -> Result<MrcStack> {
    if bytes.len() < HEADER {
        return Err(Error::Format(format!("truncated header: {} of {HEADER} bytes", bytes.len())));
    }
    let h = &bytes[..HEADER];
    if h[212] == 0x11 {
        return Err(Error::Format("big-endian MRC files are not supported".into()));
    }
    let mode = get_i32(h, 3);
    if mode != MODE_F32 {
        return Err(Error::UnsupportedMode(mode));
    }
    let dims = [get_i32(h, 0), get_i32(h, 1), get_i32(h, 2)];
    if dims.iter().any(|&d| d <= 0) {
        return Err(Error::Format(format!("invalid dimensions {dims:?}")));
    }
    let [nx, ny, nz] = dims.map(|d| d as usize);
    let ext = get_i32(h, 23);
    if ext < 0 {
        return Err(Error::Format(format!("negative extended header size {ext}")));
    }
    let start = HEADER + ext as usize;
    let n = nx * ny * nz;
    let expected = start + 4 * n;
    if bytes.len() < expected {
        return Err(Error::Format(format!("truncated data: {} of {expected} bytes", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "header/data size mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mx = get_i32(h, 7);
    let cell_x = get_f32(h, 10) as f64;
    let voxel_size = if mx > 0 && cell_x > 0.0 { cell_x / mx as f64 } else { 1.0 };
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(MrcStack {
        shape: Shape3::new(nz, ny, nx),
        voxel_size,
        data,
    })
}

/// Serializes a stack; `is_volume` picks space group 1 over 0 (image stack).
pub fn encode_mrc(shape: Shape3, voxel_size: f64, data: &[f32], is_volume: bool) -> Result<Vec<u8>> {
    if data.len() != shape.len() || shape.is_empty() {
        return Err(Error::InvalidConfig("data length does not match the shape".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MRC data"));
    }
    let mut h = vec![0u8; HEADER];
    let (nx, ny, nz) = (shape.w as i32, shape.h as i32, shape.d as i32);
    for (i, v) in [nx, ny, nz, MODE_F32, 0, 0, 0, nx, ny, nz].into_iter().enumerate() {
        put_i32(&mut h, i, v);
    }
    for (i, n) in [(10, nx), (11, ny), (12, nz)] {
        put_f32(&mut h, i, (voxel_size * n as f64) as f32);
    }
    for i in 13..16 {
        put_f32(&mut h, i, 90.0);
    }
    for (i, v) in [(16, 1), (17, 2), (18, 3)] {
        put_i32(&mut h, i, v);
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let rms = (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = data.iter().copied().fold(f32::INFINITY, f32::min);
    let max = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    put_f32(&mut h, 19, min);
    put_f32(&mut h, 20, max);
    put_f32(&mut h, 21, mean as f32);
    put_i32(&mut h, 22, is_volume as i32);
    put_i32(&mut h, 27, 20140);
    h[208..212].copy_from_slice(b"MAP ");
    h[212..216].copy_from_slice(&[0x44, 0x44, 0, 0]);
    put_f32(&mut h, 54, rms as f32);
    put_i32(&mut h, 55, 1);
    let label = b"dewedge";
    h[224..224 + label.len()].copy_from_slice(label);
    let mut out = h;
    out.reserve(4 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<MrcStack> {
    parse_mrc(&fs::read(path)?)
}

pub fn write_volume<T: Real>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f32> = v.data().iter().map(|x| x.as_f64() as f32).collect();
    write_bytes(path.as_ref(), &encode_mrc(v.shape(), v.voxel_size(), &data, true)?)
}

pub fn read_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let s = read_stack(path)?;
    Volume::from_vec(s.shape, s.data.into_iter().map(|x| T::of(x as f64)).collect(), s.voxel_size)
}

/// `<stem>.tlt` next to `path`.
pub fn angles_path(path: &Path) -> PathBuf {
    path.with_extension("tlt")
}

/// `<stem>.frames.mrc` next to `path`.
pub fn frames_path(path: &Path) -> PathBuf {
    path.with_extension("frames.mrc")
}

fn images_to_f32<'a, T: Real + 'a>(images: impl Iterator<Item = &'a Image<T>>) -> Vec<f32> {
    images.flat_map(|i| i.data().iter().map(|x| x.as_f64() as f32)).collect()
}

/// Writes the stack, the angle sidecar and, when every projection carries
/// frames, the frame stack.
pub fn write_tilt_series<T: Real>(t: &TiltSeries<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = t.image_shape();
    let data = images_to_f32(t.projections().iter().map(|p| &p.data));
    write_bytes(path, &encode_mrc(Shape3::new(t.len(), h, w), t.pixel_size(), &data, false)?)?;
    let mut tlt = String::new();
    for a in t.angles() {
        tlt.push_str(&format!("{a}\n"));
    }
    fs::write(angles_path(path), tlt)?;
    let fp = frames_path(path);
    if t.has_frames() {
        let m = t.projections()[0].frames.as_ref().map_or(0, Vec::len);
        if t.projections().iter().any(|p| p.frames.as_ref().map_or(0, Vec::len) != m) {
            return Err(Error::InvalidConfig("all tilts need the same number of frames".into()));
        }
        let frames = images_to_f32(t.projections().iter().flat_map(|p| p.frames.iter().flatten()));
        write_bytes(&fp, &encode_mrc(Shape3::new(t.len() * m, h, w), t.pixel_size(), &frames, false)?)?;
    } else if fp.exists() {
        fs::remove_file(fp)?;
    }
    Ok(())
}

/// Angles in degrees, one per non-empty line.
pub fn read_angles(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<f64>().map_err(|e| Error::Format(format!("bad tilt angle {l:?}: {e}"))))
        .collect()
}

fn split_images<T: Real>(s: &MrcStack) -> Vec<Image<T>> {
    let plane = s.shape.h * s.shape.w;
    s.data
        .chunks_exact(plane)
        .map(|c| {
            Image::from_vec(s.shape.h, s.shape.w, c.iter().map(|&x| T::of(x as f64)).collect())
                .expect("plane-sized chunk")
        })
        .collect()
}

/// Reads a stack plus its angle sidecar (and frames, if present).
pub fn read_tilt_series<T: Real>(path: impl AsRef<Path>) -> Result<TiltSeries<T>> {
    let path = path.as_ref();
    let s = read_stack(path)?;
    let angles = read_angles(angles_path(path))?;
    if angles.len() != s.shape.d {
        return Err(Error::Format(format!(
            "{} sections but {} tilt angles",
            s.shape.d,
            angles.len()
        )));
    }
    let images = split_images::<T>(&s);
    let fp = frames_path(path);
    let mut frames: Option<Vec<Vec<Image<T>>>> = None;
    if fp.exists() {
        let f = read_stack(&fp)?;
        if f.shape.h != s.shape.h || f.shape.w != s.shape.w || f.shape.d % s.shape.d != 0 {
            return Err(Error::Format("frame stack does not match the tilt stack".into()));
        }
        let m = f.shape.d / s.shape.d;
        let all = split_images::<T>(&f);
        frames = Some(all.chunks(m).map(<[Image<T>]>::to_vec).collect());
    }
    let frames_per_tilt = frames.as_ref().map_or(1, |f| f[0].len());
    let projections = images
        .into_iter()
        .zip(&angles)
        .enumerate()
        .map(|(k, (data, &angle))| Projection {
            data,
            angle,
            frames: frames.as_ref().map(|f| f[k].clone()),
            transfer_function: None,
        })
        .collect();
    let n = angles.len();
    let (min, max) = (angles[0], angles[n - 1]);
    let increment = if n > 1 { (max - min) / (n - 1) as f64 } else { 1.0 };
    let scheme = TiltScheme {
        min_angle: min,
        max_angle: if n > 1 { max } else { min + increment },
        increment,
        frames_per_tilt,
    };
    TiltSeries::new(projections, scheme, s.voxel_size)
}

/// A stack loads as a tilt series when its angle sidecar exists.
pub fn read_mrc<T: Real>(path: impl AsRef<Path>) -> Result<MrcContent<T>> {
    let path = path.as_ref();
    if angles_path(path).exists() {
        Ok(MrcContent::TiltSeries(read_tilt_series(path)?))
    } else {
        Ok(MrcContent::Volume(read_volume(path)?))
    }
}
