//! Mixed-type tabular data synthesis: a transformer VAE maps rows to a latent
//! token space, a score-based diffusion model learns that latent
//! distribution, and reverse-time solvers turn noise back into rows.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod imputer;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod table;
pub mod tokenizer;
pub mod toy;
pub mod vae;

pub use error::{Error, Result};
