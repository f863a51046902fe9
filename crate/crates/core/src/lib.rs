//! Diffusion finetuning for a frozen autoregressive language model.
//!
//! A small decoder-only transformer (the main path) is pretrained and frozen.
//! A parallel diffusion path cross-attends into its cached keys and values and
//! is trained with a cross-entropy diffusion objective, so that next-token
//! prediction can spend more ODE steps at inference time for better answers.

pub mod base_lm;
pub mod data;
pub mod diffusion_core;
pub mod diffusion_path;
pub mod error;
pub mod inference;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod training;

pub use error::{L2dError, Result};
