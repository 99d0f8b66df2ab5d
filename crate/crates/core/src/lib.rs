//! Coupled continuous/discrete diffusion over a synthetic bimodal world.
//!
//! Stage I learns a diffusion prior over unit-norm semantic vectors; Stage II
//! learns an absorbing-state token diffusion conditioned on those vectors
//! through an injected context slot.

pub mod bridge;
pub mod config;
pub mod datagen;
pub mod discrete;
pub mod eval;
pub mod gates;
pub mod latent;
pub mod modality;
pub mod pipeline;
pub mod nets;
pub mod rng;
pub mod schedules;
pub mod tensor;
pub mod trainer;
