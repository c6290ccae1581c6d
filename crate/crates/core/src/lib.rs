//! One-class collaborative filtering with two-headed autoencoders.
//!
//! A shared ReLU encoder feeds a squared-error head that serves
//! recommendations and a contrastive head trained with popularity negative
//! sampling or closed-form noise-contrastive targets.

pub(crate) mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod objectives;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{ModelKind, TwoHeadedModel};
pub use trainer::{TrainConfig, TrainMode, TrainReport};
