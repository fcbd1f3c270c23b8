//! LLM-proxied architecture search for diffusion denoisers at desk scale.

pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod frechet;
pub mod rankcorr;
pub mod rng;
pub mod schedule;
pub mod proxy;
pub mod search;

pub use error::{Error, Result};
