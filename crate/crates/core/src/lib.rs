//! Structured pruning toolkit for sandwich-norm GQA transformers.
//!
//! The pipeline is: run a calibration set through the model
//! ([`calibrate`]), turn the activation statistics into channel, head, FFN
//! and layer importance scores ([`importance`]), rewrite the checkpoint
//! according to a [`surgery::PrunePlan`] (including cross-layer KV-group
//! merging and γ rescaling), fold post-module RMSNorms into the preceding
//! projections ([`normfuse`]), and measure the result against the unpruned
//! teacher ([`evaluate`]).

pub mod calibrate;
pub mod error;
pub mod evaluate;
pub mod importance;
pub mod kernel;
pub mod model;
pub mod normfuse;
pub mod surgery;

pub use calibrate::{ActivationStats, CalibrationSet};
pub use error::{Error, Result};
pub use evaluate::{CostEstimate, EvalReport};
pub use importance::ImportanceScores;
pub use kernel::Tensor;
pub use model::{ModelConfig, NormSite, WeightStore};
pub use normfuse::{AbsorptionReport, PostNormSite};
pub use surgery::{LayerAction, PrunePlan, SurgeryReport};
