//! End-to-end steps shared by the command-line tool and the experiments:
//! simulation, half-set reconstruction, collective fitting over several
//! tomograms, and refinement.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fbp::{fbp, FilterKind};
use crate::fit::{fit_with, FitConfig, FitMode, FitResult};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{build_model, Model, ModelConfig};
use crate::refine::{input_stats, refine, RefineConfig};
use crate::scalar::Real;
use crate::sim::{make_phantom, simulate_tilt_series, NoiseConfig, ParticleSet, PhantomConfig, TiltScheme, TiltSeries};
use crate::subtomo::{extract_pairs, split, ExtractConfig, NormStats, SplitMode, SubTomoPair};
use crate::volume::{Shape3, Volume};

/// Per-stage seeds derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub phantom: u64,
    pub noise: u64,
    pub model: u64,
    pub fit: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let mix = |k: u64| {
            let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Self {
            phantom: mix(1),
            noise: mix(2),
            model: mix(3),
            fit: mix(4),
        }
    }
}

pub struct Simulation<T> {
    pub phantom: Volume<T>,
    pub particles: ParticleSet,
    pub tilts: TiltSeries<T>,
}

pub fn simulate<T: Real>(phantom: &PhantomConfig, scheme: &TiltScheme, noise: &NoiseConfig, seeds: Seeds) -> Result<Simulation<T>> {
    let (phantom, particles) = make_phantom(phantom, seeds.phantom)?;
    let tilts = simulate_tilt_series(&phantom, scheme, noise, seeds.noise)?;
    Ok(Simulation {
        phantom,
        particles,
        tilts,
    })
}

/// FBP of the full series and of both halves.
pub struct Reconstructions<T> {
    pub full: Volume<T>,
    pub half0: Volume<T>,
    pub half1: Volume<T>,
}

pub fn reconstruct<T: Real>(t: &TiltSeries<T>, mode: SplitMode, filter: FilterKind, shape: Shape3) -> Result<Reconstructions<T>> {
    let (a, b) = split(t, mode)?;
    Ok(Reconstructions {
        full: fbp(t, filter, shape)?,
        half0: fbp(&a, filter, shape)?,
        half1: fbp(&b, filter, shape)?,
    })
}

/// Training pairs of several tomograms plus, per tomogram, the statistics
/// of its unrotated model inputs (used to rescale it before refinement).
pub fn collect_pairs<T: Real>(
    halves: &[(&Volume<T>, &Volume<T>)],
    extract: &ExtractConfig,
    fit: &FitConfig,
) -> Result<(Vec<SubTomoPair<T>>, Vec<NormStats>)> {
    let mut pairs = Vec::new();
    let mut stats = Vec::with_capacity(halves.len());
    for (r0, r1) in halves {
        let p = extract_pairs(*r0, *r1, extract)?;
        let cubes: Vec<Volume<T>> = p.iter().map(|q| q.v0.clone()).collect();
        stats.push(input_stats(&cubes, fit.crop_size, fit.alpha_max)?);
        pairs.extend(p);
    }
    Ok((pairs, stats))
}

/// Builds the model and fits it on `pairs`; `on_epoch` sees the epoch,
/// its mean loss and the current model.
pub fn train<T: Real>(
    pairs: &[SubTomoPair<T>],
    model: &ModelConfig,
    fit: &FitConfig,
    model_seed: u64,
    on_epoch: impl FnMut(usize, f64, &Model<T>) -> Result<()>,
) -> Result<FitResult<T>> {
    let m = build_model(model, model_seed)?;
    fit_with(pairs, m, fit, on_epoch)
}

pub fn refine_tomogram<T: Real>(
    model: &Model<T>,
    fit_norm: NormStats,
    target_norm: NormStats,
    r0: &Volume<T>,
    r1: &Volume<T>,
    cube_size: usize,
    overlap: usize,
) -> Result<Volume<T>> {
    let cfg = RefineConfig {
        cube_size,
        overlap,
        fit_norm,
        target_norm,
    };
    refine(model, r0, r1, &cfg)
}

/// Reduced-scale comparison of FBP, the full method and the
/// denoising-only ablation on freshly simulated tomograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub tomograms: usize,
    pub phantom: PhantomConfig,
    pub tilt: TiltScheme,
    pub target_snr: f64,
    pub split: SplitMode,
    pub filter: FilterKind,
    pub extract: ExtractConfig,
    pub model: ModelConfig,
    pub fit: FitConfig,
    pub refine_cube: usize,
    pub refine_overlap: usize,
    pub particle_cube: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tomograms: 3,
            phantom: PhantomConfig::default(),
            tilt: TiltScheme::default(),
            target_snr: 0.25,
            split: SplitMode::EvenOdd,
            filter: FilterKind::Ramp,
            extract: ExtractConfig::new(32, 0),
            model: ModelConfig::new(16, 3, 0.0),
            fit: FitConfig::default(),
            refine_cube: 32,
            refine_overlap: 16,
            particle_cube: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub fbp: Vec<MetricsReport>,
    /// One entry per fitted mode, in the order requested.
    pub fitted: Vec<(FitMode, Vec<MetricsReport>)>,
    pub loss_history: Vec<(FitMode, Vec<f64>)>,
}

impl ExperimentReport {
    pub fn mean_fbp(&self, metric: impl Fn(&MetricsReport) -> f64) -> f64 {
        mean(&self.fbp, metric)
    }

    pub fn mean_fitted(&self, mode: FitMode, metric: impl Fn(&MetricsReport) -> f64) -> Option<f64> {
        self.fitted.iter().find(|(m, _)| *m == mode).map(|(_, r)| mean(r, metric))
    }
}

fn mean(r: &[MetricsReport], metric: impl Fn(&MetricsReport) -> f64) -> f64 {
    r.iter().map(metric).sum::<f64>() / r.len() as f64
}

/// Simulates `cfg.tomograms` phantoms, reconstructs them, fits one model
/// per mode on all tomograms together and scores every refined tomogram.
pub fn run_experiment<T: Real>(
    cfg: &ExperimentConfig,
    modes: &[FitMode],
    mut progress: impl FnMut(FitMode, usize, f64),
) -> Result<ExperimentReport> {
    if cfg.tomograms == 0 {
        return Err(Error::InvalidConfig("need at least one tomogram".into()));
    }
    let noise = NoiseConfig {
        target_snr: cfg.target_snr,
        ..Default::default()
    };
    let mut truth = Vec::new();
    let mut recs = Vec::new();
    let mut fbp_reports = Vec::new();
    for i in 0..cfg.tomograms {
        let seeds = Seeds::derive(cfg.seed.wrapping_add(i as u64));
        let sim = simulate::<T>(&cfg.phantom, &cfg.tilt, &noise, seeds)?;
        let r = reconstruct(&sim.tilts, cfg.split, cfg.filter, cfg.phantom.shape)?;
        fbp_reports.push(evaluate(&r.full, &sim.phantom, cfg.fit.alpha_max, Some(&sim.particles), cfg.particle_cube)?);
        truth.push((sim.phantom, sim.particles));
        recs.push(r);
    }
    let halves: Vec<_> = recs.iter().map(|r| (&r.half0, &r.half1)).collect();
    let (pairs, stats) = collect_pairs(&halves, &cfg.extract, &cfg.fit)?;
    let seeds = Seeds::derive(cfg.seed);
    let mut fitted = Vec::new();
    let mut loss_history = Vec::new();
    for &mode in modes {
        let fit = FitConfig {
            mode,
            seed: seeds.fit,
            ..cfg.fit.clone()
        };
        let res = train(&pairs, &cfg.model, &fit, seeds.model, |e, l, _| {
            progress(mode, e, l);
            Ok(())
        })?;
        let mut reports = Vec::new();
        for ((r, (gt, particles)), st) in recs.iter().zip(&truth).zip(&stats) {
            let out = refine_tomogram(&res.model, res.norm, *st, &r.half0, &r.half1, cfg.refine_cube, cfg.refine_overlap)?;
            reports.push(evaluate(&out, gt, cfg.fit.alpha_max, Some(particles), cfg.particle_cube)?);
        }
        fitted.push((mode, reports));
        loss_history.push((mode, res.loss_history));
    }
    Ok(ExperimentReport {
        fbp: fbp_reports,
        fitted,
        loss_history,
    })
}

impl RunConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }
}
