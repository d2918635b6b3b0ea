//! Few-shot prototypical networks trained with a class-aware margin loss,
//! combined by hard and soft voting.
//!
//! The crate carries its own small reverse-mode autodiff ([`numeric`]) so
//! that every gradient can be checked against finite differences at 64-bit
//! precision.

pub mod cal;
pub mod config;
pub mod encoder;
pub mod ensemble;
pub mod episodes;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod protonet;
pub mod trainer;

pub use config::RunConfig;
pub use encoder::{Encoder, EncoderKind, EncoderSpec, FrozenEmbeddingStore};
pub use ensemble::{hard_vote, soft_vote, ModelPredictions, PredictionMatrix};
pub use episodes::{DatasetIndex, Episode, EpisodeSpec};
pub use error::{Error, FormatError, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use trainer::{AnyModel, ProtoModel, TrainConfig};
