//! Twin-backbone audio-video flow-matching transformer with reference
//! LoRA conditioning, contrastive identity/timbre objectives, guided
//! Euler sampling and a manifest curation pipeline.
//!
//! The model works directly on latent token sequences. Base weights are
//! randomly initialized and frozen; only the reference LoRA adapters and
//! the global face/timbre projections train.

pub mod attention;
pub mod checkpoint;
pub mod commands;
pub mod datapipe;
pub mod flowmatch;
pub mod fusion;
pub mod numerics;
pub mod objectives;
pub mod reflora;
pub mod sampling;
pub mod seed;
pub mod trainer;

pub use numerics::{Gradients, NumericsError, Tape, Tensor, Var};
