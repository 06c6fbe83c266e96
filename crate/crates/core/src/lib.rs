//! Identity-preserving facial age editing with a subject fine-tuned latent
//! diffusion model, and the biometric verification harness used to evaluate
//! it.

pub mod age;
pub mod biometrics;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod prompts;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
