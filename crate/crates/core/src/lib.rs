//! Structure-then-detail token merging for diffusion transformers.
//!
//! Early denoising steps merge locally homogeneous windows before attention
//! and feed-forward blocks; later steps merge tokens that receive little
//! attention before the feed-forward block only. A cosine-decay schedule or
//! a calibrated adaptive threshold controls how much is merged at each
//! `(step, layer)`, and merged tokens are restored after each block.
//!
//! The [`sim`] module drives all of this on a small seeded transformer over
//! synthetic trajectories and accounts multiply-accumulate operations.

pub mod error;
pub mod exec;
pub mod merging;
pub mod numerics;
pub mod ptr;
pub mod schedule;
pub mod sim;
pub mod tokengrid;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use numerics::Matrix;
pub use tokengrid::{MergeKind, MergePlan, TokenGrid};
