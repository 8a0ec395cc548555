//! Self-supervised fitting loop.
//!
//! Every epoch draws a fresh rotation per sub-tomogram pair, builds the
//! (input, target) sample from the current inputs, runs one pass of batched
//! Adam steps on the masked Fourier loss, and then fills the missing wedge of
//! every input with the model's prediction.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::rotation::{rotate_volume, sample_rotation, EulerAngles};
use crate::scalar::Real;
use crate::stream_rng;
use crate::subtomo::{compute_norm_stats, NormStats, SubTomoPair};
use crate::volume::{real_part, Fft3, Shape3, Volume};
use crate::wedge::{apply_wedge_with, wedge_mask, WedgeMask};

/// Anything that maps a cube to a cube of the same shape.
pub trait VolumeMap<T: Real>: Sync {
    fn apply(&self, v: &Volume<T>) -> Result<Volume<T>>;
}

impl<T: Real> VolumeMap<T> for Model<T> {
    fn apply(&self, v: &Volume<T>) -> Result<Volume<T>> {
        self.predict(v)
    }
}

impl<T: Real, F> VolumeMap<T> for F
where
    F: Fn(&Volume<T>) -> Result<Volume<T>> + Sync,
{
    fn apply(&self, v: &Volume<T>) -> Result<Volume<T>> {
        self(v)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitMode {
    #[default]
    #[serde(rename = "deepdewedge")]
    DeepDeWedge,
    #[serde(rename = "noise2noise_only")]
    Noise2NoiseOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Half tilt range of the acquisition, degrees.
    pub alpha_max: f64,
    pub mode: FitMode,
    pub update_input_wedges: bool,
    /// Side of the cubes the model sees; pair cubes are cropped to it after
    /// rotation.
    pub crop_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 4e-4,
            batch_size: 8,
            alpha_max: 60.0,
            mode: FitMode::DeepDeWedge,
            update_input_wedges: true,
            crop_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive and epochs, batch_size, crop_size at least 1".into(),
            ));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max <= 90.0) {
            return Err(Error::InvalidConfig(format!("alpha_max must lie in (0, 90], got {}", self.alpha_max)));
        }
        Ok(())
    }

    fn wedge_update(&self) -> bool {
        self.mode == FitMode::DeepDeWedge && self.update_input_wedges
    }
}

/// Side of the oversized extraction cube that lets a cube of side `s` be
/// rotated arbitrarily without reading outside its source, rounded up to a
/// multiple of `multiple` so the model also accepts it.
pub fn oversized_side(s: usize, multiple: usize) -> usize {
    let diag = (3f64.sqrt() * s as f64).ceil() as usize;
    diag.div_ceil(multiple.max(1)) * multiple.max(1)
}

/// One training triplet: `input` is the rotated `v0` with the artificial
/// wedge applied, `target` the rotated, unmasked `v1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FitSample<T> {
    pub input: Volume<T>,
    pub target: Volume<T>,
    pub angles: EulerAngles,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub model: Model<T>,
    /// Mean per-voxel loss of every epoch.
    pub loss_history: Vec<f64>,
    /// Wedge-updated input cubes after the last epoch.
    pub updated_inputs: Vec<Volume<T>>,
    /// Statistics used to standardize model inputs and targets.
    pub norm: NormStats,
}

/// Rotates both cubes of `pair` by `phi`, crops them to the mask shape and
/// applies `m` to the input.
pub fn make_fit_sample<T: Real>(pair: &SubTomoPair<T>, phi: EulerAngles, m: &WedgeMask) -> Result<FitSample<T>> {
    let fft = Fft3::new(m.shape());
    build_sample(&pair.v0, &pair.v1, phi, Some(m), &fft)
}

fn build_sample<T: Real>(
    v0: &Volume<T>,
    v1: &Volume<T>,
    phi: EulerAngles,
    m: Option<&WedgeMask>,
    fft: &Fft3<T>,
) -> Result<FitSample<T>> {
    v0.shape().ensure_same(v1.shape())?;
    let s = fft.shape();
    let input = rotate_volume(v0, &phi).crop_center(s)?;
    let input = match m {
        Some(m) => apply_wedge_with(fft, &input, m)?,
        None => input,
    };
    let target = rotate_volume(v1, &phi).crop_center(s)?;
    Ok(FitSample {
        input,
        target,
        angles: phi,
    })
}

/// Per-frequency weights `M M_phi + 2 M^C M_phi`.
pub fn loss_weights(m: &WedgeMask, m_phi: &WedgeMask) -> Result<Vec<f64>> {
    m.shape().ensure_same(m_phi.shape())?;
    Ok(m.data()
        .iter()
        .zip(m_phi.data())
        .map(|(&a, &b)| match (a, b) {
            (_, 0) => 0.0,
            (1, _) => 1.0,
            _ => 2.0,
        })
        .collect())
}

/// `|| (M M_phi + 2 M^C M_phi) F(pred - target) ||^2` with the unnormalized
/// transform.
pub fn sample_loss<T: Real>(pred: &Volume<T>, target: &Volume<T>, m: &WedgeMask, m_phi: &WedgeMask) -> Result<f64> {
    pred.shape().ensure_same(target.shape())?;
    pred.shape().ensure_same(m.shape())?;
    let w = loss_weights(m, m_phi)?;
    let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
    let fft = Fft3::new(pred.shape());
    Ok(weighted_loss(&fft, pred, target, &w2, false)?.0)
}

/// Returns `sum_k w2[k] |F(pred - target)[k]|^2` and, if requested, its
/// gradient with respect to `pred`, `2 N Re F^-1(w2 F(pred - target))`.
fn weighted_loss<T: Real>(
    fft: &Fft3<T>,
    pred: &Volume<T>,
    target: &Volume<T>,
    w2: &[f64],
    with_grad: bool,
) -> Result<(f64, Option<Volume<T>>)> {
    let delta = pred.sub(target)?;
    let mut spec = fft.forward(&delta);
    let mut loss = 0.0;
    for (c, &w) in spec.data_mut().iter_mut().zip(w2) {
        loss += w * (c.re.as_f64().powi(2) + c.im.as_f64().powi(2));
        *c = *c * T::of(w);
    }
    if !with_grad {
        return Ok((loss, None));
    }
    let mut buf = spec.data().to_vec();
    fft.inverse_in_place(&mut buf);
    let g = real_part(pred.shape(), pred.voxel_size(), buf)?;
    let n2 = T::of(2.0 * pred.shape().len() as f64);
    Ok((loss, Some(g.map(|x| x * n2))))
}

/// Replaces the missing wedge of every input with that of `f(v)`:
/// `v <- F^-1(M F v + M^C F f(v))`.
pub fn update_input_wedges<T: Real, F: VolumeMap<T>>(f: &F, inputs: &[Volume<T>], wedge: &WedgeMask) -> Result<Vec<Volume<T>>> {
    let fft = Fft3::new(wedge.shape());
    inputs.par_iter().map(|v| update_one(f, v, wedge, &fft)).collect()
}

fn update_one<T: Real, F: VolumeMap<T>>(f: &F, v: &Volume<T>, wedge: &WedgeMask, fft: &Fft3<T>) -> Result<Volume<T>> {
    v.shape().ensure_same(wedge.shape())?;
    let pred = f.apply(v)?;
    pred.shape().ensure_same(v.shape())?;
    let mut a = fft.forward(v);
    let b = fft.forward(&pred);
    for ((x, y), &k) in a.data_mut().iter_mut().zip(b.data()).zip(wedge.data()) {
        if k == 0 {
            *x = *y;
        }
    }
    fft.inverse(&a)
}

const ROTATION_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

fn sample_rng(seed: u64, purpose: u64, epoch: usize, i: usize) -> ChaCha8Rng {
    stream_rng(
        seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ((epoch as u64) << 32) | i as u64,
    )
}

/// [`fit_with`] without a per-epoch callback.
pub fn fit<T: Real>(pairs: &[SubTomoPair<T>], model: Model<T>, cfg: &FitConfig) -> Result<FitResult<T>> {
    fit_with(pairs, model, cfg, |_, _, _| Ok(()))
}

/// Fits `model` to the pairs. `on_epoch(epoch, mean_loss, model)` runs after
/// every epoch (checkpointing, progress output).
pub fn fit_with<T: Real>(
    pairs: &[SubTomoPair<T>],
    mut model: Model<T>,
    cfg: &FitConfig,
    mut on_epoch: impl FnMut(usize, f64, &Model<T>) -> Result<()>,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    let first = pairs.first().ok_or(Error::Empty("sub-tomogram pairs"))?;
    let big = first.v0.shape();
    if !big.is_cubic() || big.d < cfg.crop_size {
        return Err(Error::InvalidConfig(format!(
            "pair cubes must be cubic and at least crop_size = {} voxels",
            cfg.crop_size
        )));
    }
    for p in pairs {
        big.ensure_same(p.v0.shape())?;
        big.ensure_same(p.v1.shape())?;
    }
    let small = Shape3::cube(cfg.crop_size);
    model.config().check_input(small)?;
    if cfg.wedge_update() {
        model.config().check_input(big)?;
    }

    let n = pairs.len();
    let m_small = wedge_mask(small, cfg.alpha_max, EulerAngles::IDENTITY)?;
    let m_big = wedge_mask(big, cfg.alpha_max, EulerAngles::IDENTITY)?;
    let fft_small = Fft3::<T>::new(small);
    let fft_big = Fft3::<T>::new(big);
    let artificial = (cfg.mode == FitMode::DeepDeWedge).then_some(&m_small);
    let voxels = small.len() as f64;

    let mut inputs: Vec<Volume<T>> = pairs.iter().map(|p| p.v0.clone()).collect();
    let mut norm: Option<NormStats> = None;
    let mut opt = Adam::new(model.parameter_count(), cfg.learning_rate, cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let samples = (0..n)
            .into_par_iter()
            .map(|i| {
                let phi = sample_rotation(&mut sample_rng(cfg.seed, ROTATION_STREAM, epoch, i));
                let s = build_sample(&inputs[i], &pairs[i].v1, phi, artificial, &fft_small)?;
                let m_phi = wedge_mask(small, cfg.alpha_max, phi)?;
                let w2: Vec<f64> = match cfg.mode {
                    FitMode::DeepDeWedge => loss_weights(&m_small, &m_phi)?.into_iter().map(|w| w * w).collect(),
                    FitMode::Noise2NoiseOnly => {
                        m_small.data().iter().zip(m_phi.data()).map(|(&a, &b)| (a * b) as f64).collect()
                    }
                };
                Ok((s, w2))
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = match norm {
            Some(s) => s,
            None => {
                let raw: Vec<Volume<T>> = samples.iter().map(|(s, _)| s.input.clone()).collect();
                *norm.insert(compute_norm_stats(&raw)?)
            }
        };
        let samples: Vec<(Volume<T>, Volume<T>, Vec<f64>)> = samples
            .into_iter()
            .map(|(s, w2)| (stats.standardize(&s.input), stats.standardize(&s.target), w2))
            .collect();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sample_rng(cfg.seed, SHUFFLE_STREAM, epoch, 0));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = batch
                .par_iter()
                .map(|&i| {
                    let (x, y, w2) = &samples[i];
                    let mut drop_rng = sample_rng(cfg.seed, DROPOUT_STREAM, epoch, i);
                    let (pred, tape) = model.forward_train(x, &mut drop_rng)?;
                    let (loss, grad) = weighted_loss(&fft_small, &pred, y, w2, true)?;
                    let grad = grad.expect("gradient requested").scaled(T::of(1.0 / voxels));
                    let mut g = vec![T::zero(); model.parameter_count()];
                    model.backward(&tape, &grad, &mut g)?;
                    Ok((loss / voxels, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = T::of(1.0 / batch.len() as f64);
            let mut grads = vec![T::zero(); model.parameter_count()];
            for (loss, g) in &per_sample {
                epoch_loss += loss;
                for (a, &b) in grads.iter_mut().zip(g) {
                    *a = *a + b * scale;
                }
            }
            if !epoch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    loss: epoch_loss,
                });
            }
            opt.step(model.params_mut(), &grads);
        }
        let mean = epoch_loss / n as f64;
        history.push(mean);

        if cfg.wedge_update() {
            let f = |v: &Volume<T>| -> Result<Volume<T>> {
                let y = model.predict(&stats.standardize(v))?;
                Ok(stats.destandardize(&y))
            };
            inputs = inputs.par_iter().map(|v| update_one(&f, v, &m_big, &fft_big)).collect::<Result<_>>()?;
        }
        on_epoch(epoch, mean, &model)?;
    }

    Ok(FitResult {
        model,
        loss_history: history,
        updated_inputs: inputs,
        norm: norm.expect("at least one epoch ran"),
    })
}

/// Writes `epoch,mean_loss` rows.
pub fn write_loss_csv(history: &[f64], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,mean_loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(out, "{i},{l:.9e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn oversize_rounding() {
        assert_eq!(oversized_side(16, 8), 32);
        assert_eq!(oversized_side(16, 2), 28);
        assert_eq!(oversized_side(32, 8), 56);
    }

    #[test]
    fn identical_prediction_has_zero_loss() {
        let v = Volume::from_fn(Shape3::cube(8), |z, y, x| (z * y + x) as f64);
        let m = wedge_mask(Shape3::cube(8), 60.0, EulerAngles::IDENTITY).unwrap();
        let mp = wedge_mask(Shape3::cube(8), 60.0, EulerAngles::new(0.3, 1.1, -0.4)).unwrap();
        assert_eq!(sample_loss(&v, &v, &m, &mp).unwrap(), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = Shape3::cube(6);
        let p = Volume::from_fn(s, |z, y, x| ((z * 5 + y * 3 + x) as f64 * 0.7).sin());
        let t = Volume::from_fn(s, |z, y, x| ((z + y * 2 + x * 7) as f64 * 0.3).cos());
        let m = wedge_mask(s, 45.0, EulerAngles::IDENTITY).unwrap();
        let mp = wedge_mask(s, 45.0, EulerAngles::new(0.2, 0.9, 0.1)).unwrap();
        let w2: Vec<f64> = loss_weights(&m, &mp).unwrap().iter().map(|w| w * w).collect();
        let fft = Fft3::new(s);
        let (_, g) = weighted_loss(&fft, &p, &t, &w2, true).unwrap();
        let g = g.unwrap();
        for i in [0, 17, 100, 215] {
            let mut a = p.clone();
            a.data_mut()[i] += 1e-5;
            let mut b = p.clone();
            b.data_mut()[i] -= 1e-5;
            let fd = (weighted_loss(&fft, &a, &t, &w2, false).unwrap().0
                - weighted_loss(&fft, &b, &t, &w2, false).unwrap().0)
                / 2e-5;
            assert!((fd - g.data()[i]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let s = Shape3::cube(16);
        let mk = |seed: u64| Volume::from_fn(s, |z, y, x| ((z * 3 + y * 5 + x * 7 + seed as usize) as f32 * 0.21).sin());
        let pairs: Vec<_> = (0..3)
            .map(|i| SubTomoPair {
                v0: mk(i),
                v1: mk(i + 10),
                location: [0, 0, 0],
            })
            .collect();
        let cfg = FitConfig {
            epochs: 2,
            batch_size: 2,
            crop_size: 8,
            ..Default::default()
        };
        let model = build_model::<f32>(&ModelConfig::new(2, 1, 0.0), 0).unwrap();
        let a = fit(&pairs, model.clone(), &cfg).unwrap();
        let b = fit(&pairs, model, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.loss_history.iter().all(|l| l.is_finite()));
    }
}
