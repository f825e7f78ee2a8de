//! Video saliency prediction with temporal recurrences.
//!
//! The crate contains a small reverse-mode tensor library ([`tensor`]),
//! layers built on it ([`layers`]), two temporal recurrences ([`recurrence`]):
//! an exponential moving average and a ConvLSTM cell, a miniature
//! encoder–decoder that hosts them ([`model`]), the training loop
//! ([`training`]), the saliency metric suite ([`metrics`]) and a synthetic
//! moving-blob dataset with its on-disk format ([`data`]).
//! [`eval`] runs a model over a dataset and scores it.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pgm;
pub mod recurrence;
pub mod saliency;
pub mod tensor;
pub mod training;

pub use data::{Dataset, SynthConfig, VideoSample};
pub use error::{Error, Result};
pub use metrics::{Metric, MetricReport};
pub use model::{InsertionPoint, Model, ModelConfig, RecurrenceConfig, RecurrenceStates};
pub use saliency::{FixationMap, SaliencyMap};
pub use tensor::{Tape, Tensor, Var};
pub use training::{Checkpoint, TrainConfig, Trainer};
