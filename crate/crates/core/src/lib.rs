//! Ensembles for extractive question answering over level-0 n-best lists:
//! SQuAD v2.0 scoring, hand-crafted voting rules, and a stacked CNN
//! meta-model trained on softmax-of-F1 targets.

pub mod autograd;
pub mod error;
pub mod meta_model;
pub mod metrics;
pub mod prediction_io;
pub mod stacking;
pub mod synth;
pub mod voting;

pub use error::{Error, Result};
