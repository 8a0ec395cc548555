//! Numerical checks of the identities behind the masked self-supervised loss.
//!
//! Setup: a fixed volume `x*`, two noisy observations sharing the wedge `M`,
//! `y0 = F^-1 M F (x* + n0)` and `y1 = F^-1 M F (x* + n1)`, and the doubly
//! masked input `y0~ = F^-1 M~ F y0`. The self-supervised risk
//!
//! `L = E || (M~ M + 2 M~^C M) F (f(y0~) - y1) ||^2`
//!
//! differs from the supervised risk
//!
//! `R = E || (I - M~^C M^C) F (f(y0~) - x*) ||^2`
//!
//! by a constant when the mask distribution is symmetric. Expectations over
//! masks are exact sums over a finite list; only the noise is sampled.

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::VolumeMap;
use crate::model::{build_model, ModelConfig};
use crate::rotation::EulerAngles;
use crate::scalar::Real;
use crate::stream_rng;
use crate::volume::{Fft3, Shape3, Volume};
use crate::wedge::{wedge_mask, WedgeMask};

/// Finite joint distribution of `(M, M~)`.
#[derive(Clone, Debug)]
pub struct MaskPairDistribution {
    pairs: Vec<(WedgeMask, WedgeMask, f64)>,
    symmetric: bool,
    non_overlapping: bool,
}

impl MaskPairDistribution {
    /// Probabilities must sum to one. Symmetry and overlap are read off the
    /// masks themselves.
    pub fn new(pairs: Vec<(WedgeMask, WedgeMask, f64)>) -> Result<Self> {
        let Some((first, _, _)) = pairs.first() else {
            return Err(Error::Empty("mask pair list"));
        };
        let shape = first.shape();
        for (a, b, p) in &pairs {
            shape.ensure_same(a.shape())?;
            shape.ensure_same(b.shape())?;
            if !(*p >= 0.0) {
                return Err(Error::InvalidConfig(format!("negative probability {p}")));
            }
        }
        let total: f64 = pairs.iter().map(|p| p.2).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("probabilities sum to {total}, not 1")));
        }
        let symmetric = pairs.iter().all(|(a, b, p)| {
            let swapped: f64 = pairs
                .iter()
                .filter(|(c, d, _)| c.data() == b.data() && d.data() == a.data())
                .map(|q| q.2)
                .sum();
            let same: f64 = pairs
                .iter()
                .filter(|(c, d, _)| c.data() == a.data() && d.data() == b.data())
                .map(|q| q.2)
                .sum();
            *p == 0.0 || swapped == same
        });
        let non_overlapping = pairs
            .iter()
            .all(|(a, b, _)| a.data().iter().zip(b.data()).all(|(&x, &y)| x == 1 || y == 1));
        Ok(Self {
            pairs,
            symmetric,
            non_overlapping,
        })
    }

    /// Every listed pair in both orders, all with equal probability.
    pub fn symmetric_uniform(pairs: Vec<(WedgeMask, WedgeMask)>) -> Result<Self> {
        let p = 0.5 / pairs.len().max(1) as f64;
        let both = pairs
            .into_iter()
            .flat_map(|(a, b)| [(a.clone(), b.clone(), p), (b, a, p)])
            .collect();
        Self::new(both)
    }

    /// Wedges of `+-alpha_max` turned about the tilt axis; each entry of
    /// `angles` (degrees) gives the orientations of `M` and `M~`.
    pub fn about_tilt_axis(shape: Shape3, alpha_max: f64, angles: &[(f64, f64)]) -> Result<Self> {
        let mask = |deg: f64| wedge_mask(shape, alpha_max, EulerAngles::new(0.0, deg.to_radians(), 0.0));
        let pairs = angles
            .iter()
            .map(|&(a, b)| Ok((mask(a)?, mask(b)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::symmetric_uniform(pairs)
    }

    pub fn pairs(&self) -> &[(WedgeMask, WedgeMask, f64)] {
        &self.pairs
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn is_non_overlapping(&self) -> bool {
        self.non_overlapping
    }

    pub fn shape(&self) -> Shape3 {
        self.pairs[0].0.shape()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIdentityReport {
    pub trials: usize,
    pub entries_checked: usize,
    pub violations: usize,
    /// `(trial, flat index)` of the first few violations.
    pub first_violations: Vec<(usize, usize)>,
    pub passed: bool,
}

/// Checks `A B + A^C B + B^C A = I - A^C B^C` entrywise for random binary
/// diagonal masks `A`, `B`.
pub fn verify_mask_identity(shape: Shape3, trials: usize, seed: u64) -> Result<MaskIdentityReport> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    let per_trial: Vec<Vec<usize>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let (pa, pb): (f64, f64) = (rng.random(), rng.random());
            (0..shape.len())
                .filter(|_| {
                    let a = rng.random_bool(pa) as i32;
                    let b = rng.random_bool(pb) as i32;
                    mask_identity_holds(a, b).is_some()
                })
                .collect()
        })
        .collect();
    let violations = per_trial.iter().map(Vec::len).sum();
    let first_violations = per_trial
        .iter()
        .enumerate()
        .flat_map(|(t, v)| v.iter().map(move |&i| (t, i)))
        .take(16)
        .collect();
    Ok(MaskIdentityReport {
        trials,
        entries_checked: trials * shape.len(),
        violations,
        first_violations,
        passed: violations == 0,
    })
}

/// `None` if both sides agree for the diagonal entries `a`, `b`; otherwise
/// the two sides.
pub fn mask_identity_holds(a: i32, b: i32) -> Option<(i32, i32)> {
    let (ac, bc) = (1 - a, 1 - b);
    let lhs = a * b + ac * b + bc * a;
    let rhs = 1 - ac * bc;
    (lhs != rhs).then_some((lhs, rhs))
}

/// Mean and standard error of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub standard_error: f64,
}

impl Estimate {
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = if x.len() > 1 {
            x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            standard_error: (var / n).sqrt(),
        }
    }

    /// `|self - other| <= k * sqrt(se1^2 + se2^2)`.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        (self.mean - other.mean).abs() <= k * self.standard_error.hypot(other.standard_error)
    }

    /// `|self - value| <= k * se`.
    pub fn consistent_with(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.standard_error
    }
}

fn gaussian<T: Real>(shape: Shape3, sigma: f64, rng: &mut impl Rng) -> Volume<T> {
    Volume::from_fn(shape, |_, _, _| T::of(sigma * rng.sample::<f64, _>(StandardNormal)))
}

/// Monte-Carlo estimate of `E ||f(y0) - y1||^2 - E ||f(y0) - x*||^2` with
/// `y_i = x* + n_i` and independent Gaussian `n_i` of the given deviations.
/// The expectation equals `target_sigma^2 * x*.len()` whatever `f` is.
pub fn noise2noise_gap<T: Real, F: VolumeMap<T>>(
    f: &F,
    x_star: &Volume<T>,
    input_sigma: f64,
    target_sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<Estimate> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    let shape = x_star.shape();
    let gaps = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let y0 = x_star.add(&gaussian(shape, input_sigma, &mut rng))?;
            let n1 = gaussian::<T>(shape, target_sigma, &mut rng);
            let out = f.apply(&y0)?;
            let (mut to_y1, mut to_x) = (0.0, 0.0);
            for ((&o, &x), &n) in out.data().iter().zip(x_star.data()).zip(n1.data()) {
                let d = o.as_f64() - x.as_f64();
                to_x += d * d;
                to_y1 += (d - n.as_f64()).powi(2);
            }
            Ok(to_y1 - to_x)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&gaps))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Config {
    pub input_sigma: f64,
    pub target_sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Per-model result of [`prop1_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1ModelReport {
    pub l: Estimate,
    pub r: Estimate,
    pub difference: Estimate,
    /// `<M~ M F(f(y0~) - x*), M~ M F n1>`, zero in expectation.
    pub cross_term: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub complement_weight: f64,
    pub non_overlapping: bool,
    pub models: Vec<Prop1ModelReport>,
    /// `(L - R)` of each model minus that of the first, paired over the
    /// shared noise draws.
    pub difference_vs_first: Vec<Estimate>,
}

/// Weight of the `M~^C M` term in the training loss.
pub const COMPLEMENT_WEIGHT: f64 = 2.0;

/// Per-trial, per-model sums over the mask list.
#[derive(Clone, Copy, Default)]
struct Trial {
    /// `E_M ||M~ M F (f - y1)||^2`.
    inner: f64,
    /// `E_M ||M~^C M F (f - y1)||^2`.
    outer: f64,
    r: f64,
    cross: f64,
}

/// [`prop1_check_weighted`] at the loss weight [`COMPLEMENT_WEIGHT`].
pub fn prop1_check<T: Real, F: VolumeMap<T>>(
    models: &[F],
    dist: &MaskPairDistribution,
    x_star: &Volume<T>,
    cfg: &Prop1Config,
) -> Result<Prop1Report> {
    let mut r = prop1_check_weighted(models, dist, x_star, cfg, &[COMPLEMENT_WEIGHT])?;
    Ok(r.remove(0))
}

/// Evaluates `L` and `R` for every map in `models`: exact enumeration over
/// `dist`, Monte Carlo over noise. Every model sees the same noise draws.
/// `L` uses `w M~^C M` in place of `2 M~^C M` for each `w` in `weights`; one
/// report per weight.
pub fn prop1_check_weighted<T: Real, F: VolumeMap<T>>(
    models: &[F],
    dist: &MaskPairDistribution,
    x_star: &Volume<T>,
    cfg: &Prop1Config,
    weights: &[f64],
) -> Result<Vec<Prop1Report>> {
    if !dist.is_symmetric() {
        return Err(Error::InvalidConfig("mask pair distribution is not symmetric".into()));
    }
    if models.is_empty() || cfg.trials == 0 {
        return Err(Error::InvalidConfig("need at least one model and one trial".into()));
    }
    let shape = x_star.shape();
    shape.ensure_same(dist.shape())?;
    let fft = Fft3::<T>::new(shape);
    let spec = |v: &Volume<T>| -> Vec<Complex<f64>> {
        fft.forward(v).data().iter().map(|c| Complex::new(c.re.as_f64(), c.im.as_f64())).collect()
    };
    let fx = spec(x_star);
    let per_trial: Vec<Vec<Trial>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(cfg.seed, t as u64);
            let n0 = spec(&gaussian::<T>(shape, cfg.input_sigma, &mut rng));
            let n1 = spec(&gaussian::<T>(shape, cfg.target_sigma, &mut rng));
            let mut acc = vec![Trial::default(); models.len()];
            for (m, mt, p) in dist.pairs() {
                let (m, mt) = (m.data(), mt.data());
                let mut buf: Vec<Complex<T>> = fx
                    .iter()
                    .zip(&n0)
                    .enumerate()
                    .map(|(k, (x, n))| {
                        let keep = (m[k] & mt[k]) as f64;
                        Complex::new(T::of(keep * (x.re + n.re)), T::of(keep * (x.im + n.im)))
                    })
                    .collect();
                fft.inverse_in_place(&mut buf);
                let input = Volume::from_vec(shape, buf.iter().map(|c| c.re).collect(), x_star.voxel_size())?;
                for (f, a) in models.iter().zip(acc.iter_mut()) {
                    let out = spec(&f.apply(&input)?);
                    let mut s = Trial::default();
                    for k in 0..out.len() {
                        let e = out[k] - fx[k];
                        // F(f - y1) = e - n1 wherever M keeps k
                        let d = (e - n1[k]).norm_sqr();
                        match (m[k], mt[k]) {
                            (1, 1) => {
                                s.inner += d;
                                s.cross += e.re * n1[k].re + e.im * n1[k].im;
                            }
                            (1, _) => s.outer += d,
                            _ => {}
                        }
                        if m[k] == 1 || mt[k] == 1 {
                            s.r += e.norm_sqr();
                        }
                    }
                    a.inner += p * s.inner;
                    a.outer += p * s.outer;
                    a.r += p * s.r;
                    a.cross += p * s.cross;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let column = |i: usize, g: &dyn Fn(&Trial) -> f64| -> Vec<f64> { per_trial.iter().map(|t| g(&t[i])).collect() };
    let report = |w: f64| {
        let w2 = w * w;
        let diffs: Vec<Vec<f64>> = (0..models.len()).map(|i| column(i, &|t| t.inner + w2 * t.outer - t.r)).collect();
        let models = (0..models.len())
            .map(|i| Prop1ModelReport {
                l: Estimate::from_samples(&column(i, &|t| t.inner + w2 * t.outer)),
                r: Estimate::from_samples(&column(i, &|t| t.r)),
                difference: Estimate::from_samples(&diffs[i]),
                cross_term: Estimate::from_samples(&column(i, &|t| t.cross)),
            })
            .collect();
        let difference_vs_first = diffs
            .iter()
            .map(|d| Estimate::from_samples(&d.iter().zip(&diffs[0]).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .collect();
        Prop1Report {
            complement_weight: w,
            non_overlapping: dist.is_non_overlapping(),
            models,
            difference_vs_first,
        }
    };
    Ok(weights.iter().map(|&w| report(w)).collect())
}

/// Sizes, trial counts and tolerances of [`run_verification`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub mask_side: usize,
    pub mask_trials: usize,
    pub n2n_side: usize,
    pub n2n_trials: usize,
    pub noise_sigma: f64,
    pub prop1_side: usize,
    pub alpha_max: f64,
    /// Tilt-axis angles (degrees) of the non-overlapping and the overlapping
    /// wedge pairs.
    pub disjoint_angles: (f64, f64),
    pub overlapping_angles: (f64, f64),
    pub exact_trials: usize,
    pub noisy_trials: usize,
    pub model: ModelConfig,
    /// Extra complement weights reported next to the loss weight.
    pub diagnostic_weights: Vec<f64>,
    pub relative_tolerance: f64,
    pub standard_errors: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mask_side: 16,
            mask_trials: 1000,
            n2n_side: 8,
            n2n_trials: 10_000,
            noise_sigma: 1.0,
            prop1_side: 16,
            alpha_max: 60.0,
            disjoint_angles: (0.0, 90.0),
            overlapping_angles: (0.0, 30.0),
            exact_trials: 4,
            noisy_trials: 10_000,
            model: ModelConfig::new(2, 1, 0.0),
            diagnostic_weights: vec![std::f64::consts::SQRT_2],
            relative_tolerance: 1e-5,
            standard_errors: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Noise2NoiseReport {
    /// `sigma^2` times the voxel count.
    pub expected: f64,
    pub gaps: Vec<Estimate>,
    pub zero_target_gap: f64,
    pub gaps_match_expected: bool,
    pub maps_agree: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactRiskReport {
    pub report: Prop1Report,
    /// `|L - R| / |L|` per model.
    pub relative_gap: Vec<f64>,
    pub passed: bool,
}

impl ExactRiskReport {
    fn new(report: Prop1Report, tol: f64) -> Self {
        let relative_gap: Vec<f64> = report
            .models
            .iter()
            .map(|m| (m.l.mean - m.r.mean).abs() / m.l.mean.abs())
            .collect();
        let passed = relative_gap.iter().all(|&g| g < tol);
        Self {
            report,
            relative_gap,
            passed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyRiskReport {
    pub report: Prop1Report,
    /// `(L - R)` equal across models within the stated standard errors.
    pub passed: bool,
}

impl NoisyRiskReport {
    fn new(report: Prop1Report, k: f64) -> Self {
        let passed = report
            .difference_vs_first
            .iter()
            .skip(1)
            .all(|d| d.consistent_with(0.0, k));
        Self { report, passed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub mask_identity: MaskIdentityReport,
    pub noise2noise: Noise2NoiseReport,
    /// Zero target noise, non-overlapping wedges; first entry at the loss
    /// weight, then one per diagnostic weight.
    pub exact_disjoint: Vec<ExactRiskReport>,
    /// Zero target noise, overlapping wedges, generalized supervised mask.
    pub exact_overlapping: Vec<ExactRiskReport>,
    /// Target noise, non-overlapping wedges; same weight order.
    pub noisy_disjoint: Vec<NoisyRiskReport>,
    /// The cross term of the noisy run averages to zero for every model.
    pub cross_term_vanishes: bool,
}

fn smooth_volume(side: usize) -> Volume<f64> {
    let c = side as f64 / 2.0;
    Volume::from_fn(Shape3::cube(side), |z, y, x| {
        let r2 = [z, y, x].iter().map(|&v| (v as f64 - c).powi(2)).sum::<f64>();
        (-r2 / (0.1 * (side * side) as f64)).exp() + 0.3 * (0.7 * x as f64).sin() * (0.4 * z as f64).cos()
    })
}

/// Runs every check with the sizes and tolerances of `cfg`.
pub fn run_verification(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let k = cfg.standard_errors;
    let mask_identity = verify_mask_identity(Shape3::cube(cfg.mask_side), cfg.mask_trials, cfg.seed)?;

    let x8 = smooth_volume(cfg.n2n_side);
    let net = build_model::<f64>(&cfg.model, cfg.seed ^ 0x5eed)?;
    let halve = |v: &Volume<f64>| Ok(v.scaled(0.5));
    let s = cfg.noise_sigma;
    let gaps = vec![
        noise2noise_gap(&halve, &x8, s, s, cfg.n2n_trials, cfg.seed)?,
        noise2noise_gap(&net, &x8, s, s, cfg.n2n_trials, cfg.seed)?,
    ];
    let expected = s * s * x8.shape().len() as f64;
    let zero_target_gap = noise2noise_gap(&net, &x8, s, 0.0, 16, cfg.seed)?.mean;
    let gaps_match_expected = gaps.iter().all(|g| g.consistent_with(expected, k));
    let maps_agree = gaps[0].agrees_with(&gaps[1], k);
    let noise2noise = Noise2NoiseReport {
        expected,
        gaps,
        zero_target_gap,
        gaps_match_expected,
        maps_agree,
        passed: gaps_match_expected && maps_agree && zero_target_gap == 0.0,
    };

    let shape = Shape3::cube(cfg.prop1_side);
    let x = smooth_volume(cfg.prop1_side);
    let models = [
        build_model::<f64>(&cfg.model, cfg.seed.wrapping_add(1))?,
        build_model::<f64>(&cfg.model, cfg.seed.wrapping_add(2))?,
    ];
    let mut weights = vec![COMPLEMENT_WEIGHT];
    weights.extend(&cfg.diagnostic_weights);
    let disjoint = MaskPairDistribution::about_tilt_axis(shape, cfg.alpha_max, &[cfg.disjoint_angles])?;
    let overlapping = MaskPairDistribution::about_tilt_axis(shape, cfg.alpha_max, &[cfg.overlapping_angles])?;
    let exact = Prop1Config {
        input_sigma: cfg.noise_sigma,
        target_sigma: 0.0,
        trials: cfg.exact_trials,
        seed: cfg.seed,
    };
    let tol = cfg.relative_tolerance;
    let exact_disjoint = prop1_check_weighted(&models, &disjoint, &x, &exact, &weights)?
        .into_iter()
        .map(|r| ExactRiskReport::new(r, tol))
        .collect();
    let exact_overlapping = prop1_check_weighted(&models, &overlapping, &x, &exact, &weights)?
        .into_iter()
        .map(|r| ExactRiskReport::new(r, tol))
        .collect();
    let noisy = Prop1Config {
        target_sigma: cfg.noise_sigma,
        trials: cfg.noisy_trials,
        ..exact
    };
    let noisy_disjoint: Vec<NoisyRiskReport> = prop1_check_weighted(&models, &disjoint, &x, &noisy, &weights)?
        .into_iter()
        .map(|r| NoisyRiskReport::new(r, k))
        .collect();
    let cross_term_vanishes = noisy_disjoint[0]
        .report
        .models
        .iter()
        .all(|m| m.cross_term.consistent_with(0.0, k));
    Ok(VerifyReport {
        mask_identity,
        noise2noise,
        exact_disjoint,
        exact_overlapping,
        noisy_disjoint,
        cross_term_vanishes,
    })
}
