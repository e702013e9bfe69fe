//! Sampled softmax training with two-pass adaptive negative sampling
//! (TAPAS), a simulated sharded parameter server, synthetic benchmarks and
//! ranking metrics.

pub mod cli;
pub mod config;
pub mod data_synth;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod shard_sim;
pub mod tapas;
pub mod train;

pub use data_synth::{Dataset, GaussianMixtureSpec, LinearGenerator, NonlinearGenSpec, NonlinearGenerator};
pub use error::{Error, Result};
pub use eval::{MetricRecord, MetricSeries};
pub use model::{ContextEncoder, EncoderKind, LabelEmbeddingTable, Model};
pub use numerics::{Mat, Rng};
pub use sampler::SamplingDistribution;
pub use tapas::{CandidateSet, TapasConfig};
pub use train::{run_training, LossMode, RunConfig, TrainConfig};
