//! Gaussian splatting trained as a Markov-chain Monte Carlo sampler.

pub mod camera;
pub mod error;
pub mod gaussian;
pub mod img;
pub mod loss;
pub mod mcmc;
pub mod numeric;
pub mod oracle;
pub mod relocate;
pub mod scene_io;
pub mod trainer;
pub mod render;

pub use camera::{Camera, CameraMode};
pub use error::{Error, Result};
pub use gaussian::{classify_liveness, GaussianGrads, GaussianSet, Group, LivenessMask};
