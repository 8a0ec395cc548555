//! Phantom generation and tilt-series simulation.

mod phantom;
mod tilt;

pub use phantom::{make_phantom, Particle, ParticleKind, ParticleSet, PhantomConfig};
pub(crate) use tilt::mean_image;
pub use tilt::{project, simulate_tilt_series, NoiseConfig, NoiseKind, Projection, TiltScheme, TiltSeries};
