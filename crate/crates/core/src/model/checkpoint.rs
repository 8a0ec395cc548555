//! Binary model checkpoints.
//!
//! Layout (all little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 4     | magic `DWCK`                    |
//! | 1     | format version (1)              |
//! | 4     | `base_channels` (u32)           |
//! | 4     | `depth` (u32)                   |
//! | 8     | `dropout_p` (f64)               |
//! | 8     | `seed` (u64)                    |
//! | 8     | parameter count `P` (u64)       |
//! | 4 P   | parameters (f32)                |

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: [u8; 4] = *b"DWCK";
pub const VERSION: u8 = 1;

pub fn write_checkpoint<T: Real, W: Write>(m: &Model<T>, mut out: W) -> Result<()> {
    let cfg = m.config();
    let mut buf = Vec::with_capacity(37 + 4 * m.parameter_count());
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(cfg.base_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.depth as u32).to_le_bytes());
    buf.extend_from_slice(&cfg.dropout_p.to_le_bytes());
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&(m.parameter_count() as u64).to_le_bytes());
    for p in m.params() {
        buf.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(mut input: R) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 37 || bytes[..4] != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let cfg = ModelConfig {
        base_channels: u32_at(5) as usize,
        depth: u32_at(9) as usize,
        dropout_p: f64::from_le_bytes(bytes[13..21].try_into().unwrap()),
        seed: u64_at(21),
    };
    let count = u64_at(29) as usize;
    let body = &bytes[37..];
    if body.len() != 4 * count {
        return Err(Error::Format(format!(
            "checkpoint declares {count} parameters but carries {} bytes",
            body.len()
        )));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Model::from_params(cfg, params)
}

pub fn save<T: Real>(m: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(m, std::io::BufWriter::new(f))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    read_checkpoint(std::fs::File::open(path)?)
}
