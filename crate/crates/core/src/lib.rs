//! Joint encoder-decoder self-supervised speech pretraining at desk
//! scale: autodiff substrate, synthetic corpus, unit discovery, the
//! masked-prediction and collapsed-sequence objectives, joint
//! CTC/attention finetuning, decoding, and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod frontend;
pub mod graph;
pub mod kmeans;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod targets;
pub mod training;

pub use config::ExperimentConfig;
pub use error::{CoreError, Result};
pub use graph::{Graph, Precision, Tensor, TensorId};
pub use params::ParamStore;
pub use training::{EvalReport, FinetuneMode, MetricsRecord};
