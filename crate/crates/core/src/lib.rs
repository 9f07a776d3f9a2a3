//! Desk-scale two-stream personalization of a latent diffusion model on a
//! synthetic image world.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod nets;
pub mod prompts;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default working precision.
pub type Real = f64;
pub type Image = nets::Image<Real>;
pub type Latent = schedule::Latent<Real>;
pub type ModelState = nets::ModelState<Real>;
pub type NoiseSchedule = schedule::NoiseSchedule<Real>;
