//! Black-box counterfactual explanations for image classifiers.
//!
//! A small conditional diffusion model is taught, through learnable
//! conditioning tokens, what the dataset looks like (context tokens) and
//! what a classifier associates with each class (class tokens, learned only
//! from images the classifier assigns to that class). A counterfactual is
//! produced by exactly inverting the input under the source-class prompt
//! with the coupled two-stream sampler and regenerating it under the target
//! prompt, pushing away from the source with negative guidance.
//!
//! Module map:
//! - [`diffusion`]: schedules, forward noising, reverse-step algebra, loss
//! - [`denoiser`]: the conditional noise predictor and its training loop
//! - [`distill`]: embedding table, prompt templates, token distillation
//! - [`guidance`]: classifier-free and negative guidance combiners
//! - [`edict`]: the exactly invertible coupled sampler
//! - [`pipeline`]: black-box classifier contract, escalation, benchmark
//! - [`data`]: synthetic attribute-controlled dataset and auxiliary nets
//! - [`metrics`]: validity, realism, proximity and efficiency metrics

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod distill;
pub mod edict;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ImageShape, LatentBatch, LatentImage};
