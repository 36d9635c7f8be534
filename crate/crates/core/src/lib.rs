//! Mixture-of-experts training mechanics at desk scale.
//!
//! A small f64 autograd tape drives a pre-LN encoder-decoder whose
//! alternating FFN sublayers are top-1 gated expert layers with fixed
//! capacity. Around it sit three token assignment policies (positional,
//! grouped and random token selection), expert aggregation and pruning on
//! checkpoints, a multitask trainer for translation plus denoising, an
//! analytic memory planner for expert and ZeRO parallelism, and a simulated
//! expert-parallel All-to-All. [`experiments`] holds the drivers behind the
//! `moe-forge` binary.
pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod model;
pub mod multitask;
pub mod optim;
pub mod parallel;
pub mod routing;
pub mod seed;
pub mod stats;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
