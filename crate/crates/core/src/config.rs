//! Single JSON document describing a whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbp::FilterKind;
use crate::fit::FitConfig;
use crate::model::ModelConfig;
use crate::sim::{NoiseConfig, PhantomConfig, TiltScheme};
use crate::subtomo::{ExtractConfig, SplitMode};

/// Where every command reads and writes by default, relative to `work_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub work_dir: PathBuf,
    pub phantom: PathBuf,
    pub particles: PathBuf,
    pub tilt_series: PathBuf,
    pub half0: PathBuf,
    pub half1: PathBuf,
    pub fbp: PathBuf,
    pub fbp0: PathBuf,
    pub fbp1: PathBuf,
    pub model: PathBuf,
    pub loss_csv: PathBuf,
    pub refined: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("."),
            phantom: "phantom.mrc".into(),
            particles: "particles.json".into(),
            tilt_series: "tilts.mrc".into(),
            half0: "tilts_0.mrc".into(),
            half1: "tilts_1.mrc".into(),
            fbp: "fbp.mrc".into(),
            fbp0: "fbp_0.mrc".into(),
            fbp1: "fbp_1.mrc".into(),
            model: "model.bin".into(),
            loss_csv: "loss.csv".into(),
            refined: "refined.mrc".into(),
            metrics: "metrics.json".into(),
        }
    }
}

impl Paths {
    /// `p` joined onto `work_dir` unless it is absolute.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.work_dir.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub cube_size: usize,
    pub overlap: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            cube_size: 32,
            overlap: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    /// Cube side for per-particle FSC; `0` scores the whole volume.
    pub particle_cube: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { particle_cube: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub phantom: PhantomConfig,
    pub tilt: TiltScheme,
    pub noise: NoiseConfig,
    pub split: SplitMode,
    pub filter: FilterKind,
    pub extract: ExtractConfig,
    pub model: ModelConfig,
    pub fit: FitConfig,
    pub refine: RefineOptions,
    pub metrics: MetricOptions,
    pub seed: u64,
}

impl Default for RunConfig {
    /// Desk-scale defaults: a 64-voxel phantom and a base-16 model.
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            phantom: PhantomConfig::default(),
            tilt: TiltScheme::default(),
            noise: NoiseConfig::default(),
            split: SplitMode::default(),
            filter: FilterKind::default(),
            extract: ExtractConfig::default(),
            model: ModelConfig::new(16, 3, 0.0),
            fit: FitConfig::default(),
            refine: RefineOptions::default(),
            metrics: MetricOptions::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.tilt.validate()?;
        self.extract.validate()?;
        self.model.validate()?;
        self.fit.validate()?;
        if self.refine.overlap >= self.refine.cube_size {
            return Err(Error::InvalidConfig("refine overlap must be smaller than the cube".into()));
        }
        if !(self.noise.target_snr > 0.0) {
            return Err(Error::InvalidConfig("target_snr must be positive".into()));
        }
        Ok(())
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.paths.resolve(p)
    }
}
