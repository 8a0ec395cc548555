//! Self-supervised denoising and missing-wedge reconstruction for
//! limited-angle tomography.
//!
//! The library is generic over the scalar type ([`Real`], implemented for
//! `f32` and `f64`); the aliases at the crate root fix the precision used by
//! the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fbp;
pub mod fit;
pub mod image;
pub mod metrics;
pub mod model;
pub mod mrc;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod rotation;
pub mod scalar;
pub mod sim;
pub mod subtomo;
pub mod theory;
pub mod volume;
pub mod wedge;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use fbp::{fbp, FilterKind};
pub use fit::{fit, make_fit_sample, sample_loss, update_input_wedges, FitConfig, FitMode, FitResult, FitSample};
pub use image::Image;
pub use metrics::{cc, evaluate, fsc_curve, fsc_resolution, masked_cc, particle_fsc, FscCurve, MetricsReport};
pub use mrc::{read_mrc, read_tilt_series, read_volume, write_tilt_series, write_volume, MrcContent};
pub use model::{build_model, forward, Model, ModelConfig};
pub use refine::{refine, RefineConfig};
pub use rotation::{rotate_volume, sample_rotation, EulerAngles, Rotation};
pub use scalar::Real;
pub use subtomo::{compute_norm_stats, extract_pairs, normalize_tomogram, reassemble, split, ExtractConfig, NormStats, SplitMode, SubTomoPair};
pub use sim::{make_phantom, project, simulate_tilt_series, NoiseConfig, ParticleSet, PhantomConfig, TiltScheme, TiltSeries};
pub use theory::{noise2noise_gap, prop1_check, run_verification, verify_mask_identity, MaskPairDistribution, VerifyConfig, VerifyReport};
pub use volume::{from_fourier, to_fourier, Shape3, SpectralVolume, Volume};
pub use wedge::{apply_wedge, wedge_mask, WedgeMask};

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type Model32 = Model<f32>;
pub type TiltSeries32 = TiltSeries<f32>;

/// Independent RNG for sub-stream `stream` of `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
