//! Decoupled memory-bank alignment from visual scene embeddings to separated
//! timbre and environment-sound embeddings.
//!
//! - [`numkernel`]: tensors, tape-based reverse-mode differentiation, seeded RNG
//! - [`dmsva`]: the four-bank model, both pathways and every loss term
//! - [`synthgen`]: a factorized synthetic world standing in for pretrained encoders
//! - [`trainer`]: AdamW training, EMA shadow weights, checkpoints
//! - [`evaluator`]: recall@k, decoupling margins, fusion baselines, slot sweeps
//! - [`verify`]: finite-difference checks of every loss gradient

pub mod dmsva;
pub mod evaluator;
pub mod numkernel;
pub mod synthgen;
pub mod trainer;
pub mod verify;

pub use dmsva::{DmsvaModel, LossBreakdown, LossWeights, PathwayOutput};
pub use synthgen::{LatentWorld, PairMode, SamplePair, WorldSpec};
pub use trainer::{fit, Checkpoint, TrainConfig, Trainer};
