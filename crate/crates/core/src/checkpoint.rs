//! Model checkpoints: a short JSON header followed by the parameters as
//! little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::model::{Model, ModelConfig};
use crate::scalar::Real;
use crate::subtomo::NormStats;

const MAGIC: &[u8; 8] = b"DWMODEL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub fit: FitConfig,
    /// Statistics the inputs were standardized with.
    pub norm: Option<NormStats>,
    /// Completed epochs.
    pub epoch: usize,
}

pub fn write_checkpoint<T: Real>(model: &Model<T>, meta: &CheckpointMeta, mut out: impl Write) -> Result<()> {
    let header = serde_json::to_vec(meta)?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(4 * model.parameter_count());
    for p in model.params() {
        buf.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(mut input: impl Read) -> Result<(Model<T>, CheckpointMeta)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if rest.len() % 4 != 0 {
        return Err(Error::Format("truncated parameter block".into()));
    }
    let params = rest
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64))
        .collect();
    Ok((Model::from_params(meta.model.clone(), params)?, meta))
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, meta, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointMeta)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn round_trip() {
        let m = build_model::<f32>(&ModelConfig::new(2, 1, 0.0), 5).unwrap();
        let meta = CheckpointMeta {
            model: m.config().clone(),
            fit: FitConfig::default(),
            norm: Some(NormStats::new(0.5, 2.0).unwrap()),
            epoch: 3,
        };
        let mut buf = Vec::new();
        write_checkpoint(&m, &meta, &mut buf).unwrap();
        let (m2, meta2) = read_checkpoint::<f32>(&buf[..]).unwrap();
        assert_eq!(m2.params(), m.params());
        assert_eq!(meta2, meta);
        assert!(read_checkpoint::<f32>(&buf[..buf.len() - 2]).is_err());
    }
}
