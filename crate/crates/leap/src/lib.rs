//! Learnable embedding augmentation for long-tailed data.
//!
//! The library models per-class intra-class diversity through the
//! distribution of angles between features and their class center, and
//! transfers the angular variance of sample-rich (head) classes to
//! sample-poor (tail) classes by perturbing the target angle inside an
//! angular margin loss. Modules:
//!
//! - [`sphere`]: unit-sphere primitives (angles, cone sampling,
//!   Householder reflections, Monte-Carlo angle-bound verification)
//! - [`stats`]: class centers, angle memories, and the head-to-tail
//!   variance transfer plan
//! - [`loss`]: normalized softmax / CosFace / ArcFace and their
//!   angle-perturbed variants, with analytic gradients
//! - [`datagen`]: reproducible synthetic long-tailed datasets
//! - [`trainer`]: mini-batch training loop, optimizers, checkpoints
//! - [`eval`]: retrieval metrics (Rank-1, mAP) and variance reports

pub mod datagen;
pub mod eval;
pub mod loss;
pub mod sphere;
pub mod stats;
pub mod trainer;

pub use sphere::{Angle, UnitVector};
pub use stats::{AngleMemory, AngularStats, ClassCenter, StatsConfig, TransferPlan};
pub use loss::{EmbeddingBatch, LossConfig, LossFamily, LossOutput, WeightMatrix};
pub use trainer::{Checkpoint, LrSchedule, OptimizerConfig, TrainConfig, TrainLog};
