//! Trait-routing attention on a toy latent diffusion model, with
//! multi-evaluator preference construction and diffusion DPO alignment.
//!
//! Module map:
//!
//! * [`numerics`]: matrices, seeded RNG, activations, statistics, gradient oracle
//! * [`lora_attention`]: adapted projections, isolated/cross/injection attention
//! * [`trait_router`]: noisy top-k gating, expert mixture, routing entropy
//! * [`diffusion`]: schedule, denoiser, MSE training, CFG, DDIM, condition dropout
//! * [`mpo`]: candidate sampling, evaluators, Z-score ranking, preference pairs
//! * [`dpo`]: diffusion DPO loss and the stage-2 training loop

#![allow(clippy::needless_range_loop)]

pub mod diffusion;
pub mod dpo;
pub mod error;
pub mod lora_attention;
pub mod mpo;
pub mod numerics;
pub mod trait_router;

pub use error::{Error, Result};
pub use numerics::{Matrix2D, SeededRng};
