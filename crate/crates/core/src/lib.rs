//! Real-versus-fake image detection with supervised-contrastive backbones,
//! frozen-backbone classifier heads and a three-model majority-vote ensemble.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cli;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synth;

pub use error::{Error, Result};
