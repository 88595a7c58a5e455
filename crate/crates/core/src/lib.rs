//! One-shot face stylization on a small latent diffusion model.
//!
//! Identifiers for the style and content of a source and a target image are
//! learned by fine-tuning with contrastive prompts ([`trainer`]), then
//! recombined at inference while the content columns of the cross-attention
//! maps are copied from a source reconstruction pass ([`fcc`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fcc;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ppm;
pub mod prompt;
pub mod session;
pub mod synth;
pub mod tensor;
pub mod text_encoder;
pub mod trainer;

pub use error::{Error, Result};
