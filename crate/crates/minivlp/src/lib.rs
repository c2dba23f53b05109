//! Desk-scale vision-language pretraining with attention-guided synchronized
//! masking.
//!
//! A teacher/student transformer pair is trained on a synthetic fashion-toy
//! corpus. The teacher's last-layer cross-attention drives coupled text/image
//! mask selection; the student learns through masked-language modeling,
//! masked-image feature distillation, queue-based contrastive alignment, and
//! binary matching with mined hard negatives. Mini-batches come from a
//! semi-hard grouped sampler with item-level false-negative handling. All of
//! it runs on a hand-rolled f64 reverse-mode autodiff tape and is
//! deterministic end to end under hierarchical seeding.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dump;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod model;
pub mod momentum;
pub mod optimizer;
pub mod rng;
pub mod sampler;
pub mod selfcheck;
pub mod tensor;
pub mod train;
