//! Dual-[CLS] sentence-pair packing with masked-language-modeling plus
//! [CLS] alignment training, and the diagnostics used to measure
//! [CLS]-embedding collapse.

pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod objective;
pub mod tokenize;
pub mod trainer;

pub use error::{Error, Result};

pub use corpus::{PackingMode, ParallelPair};
pub use encoder::{EncoderConfig, Model, ModelParams};
pub use numerics::Tensor;
pub use objective::{AlignmentLoss, StepLosses};
pub use tokenize::{PackedExample, Vocab};
pub use trainer::{EpochRecord, MetricsLog, RunConfig, TrainConfig};
