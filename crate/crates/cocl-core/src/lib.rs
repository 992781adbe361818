//! Contrastive continual learning at desk scale.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tape`]) driving an MLP encoder/projector ([`model`]), the contrastive
//! and relation-distillation loss family ([`losses`]), a two-view stochastic
//! augmentation pipeline ([`augment`]), dataset ingestion and synthesis
//! ([`data`]), the task-sequencing training loop with replay buffer
//! ([`engine`]), and decoupled linear-probe evaluation ([`eval`]).

pub mod augment;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tape;
pub mod tensor;

pub use augment::{AugConfig, ImageSample};
pub use data::{Dataset, Split, SplitPlan};
pub use engine::{
    BufferCapacity, BufferedExample, EpochMetrics, ReplayBuffer, Scenario, TaskSequence,
    TaskSpec, TrainConfig,
};
pub use error::{CoclError, Result};
pub use eval::{AccuracyMatrix, LinearProbe, ProbeConfig, ProbePool};
pub use losses::{AugmentedBatch, ContrastiveMode, LossConfig, PreserveMode, TotalLossParts};
pub use model::{ModelConfig, ModelState, ReferenceSnapshot};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
