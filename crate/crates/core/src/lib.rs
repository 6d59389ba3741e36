//! Robust multi-view representation learning.
//!
//! A sample-level attention fusion network maps `V` heterogeneous views of
//! each sample to one fused vector. It is trained by contrasting the fused
//! representations of two simulated corruptions of the same batch: additive
//! Gaussian noise on random (sample, view) cells, and whole views zeroed out
//! for a fixed fraction of samples. The same objective can be attached as a
//! regularizer to any host model that produces per-view hidden
//! representations.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root name the common concrete instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod optim;
pub mod perturb;
pub mod regularizer;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod train;

pub use autodiff::{DropoutMode, FrozenMasks, Tape, Tensor, Var};
pub use contrastive::{cosine_sim, rml_loss, ContrastiveConfig};
pub use data::{MultiViewDataset, Normalization, SynthSpec};
pub use error::{Result, RmlError};
pub use fusion::{AttentionTrace, FusedBatch, FusionConfig, FusionModel, Provenance};
pub use optim::{Adam, AdamConfig};
pub use perturb::{PerturbationConfig, PerturbationDraw};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use train::{infer, train_self_supervised, Ablation, LossTrace, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type FusionModel32 = FusionModel<f32>;
pub type FusionModel64 = FusionModel<f64>;
pub type FusedBatch32 = FusedBatch<f32>;
pub type FusedBatch64 = FusedBatch<f64>;
