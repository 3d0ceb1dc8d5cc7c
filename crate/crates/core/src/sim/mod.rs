//! Desk-scale simulator: synthetic trajectories, a seeded toy transformer,
//! the merge-aware forward pass, MAC accounting and feature diagnostics.

pub mod analysis;
pub mod macs;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod trajectory;

pub use macs::{MacsReport, ModelShape};
pub use pipeline::{run_batch, run_pipeline, PipelineOptions, RunOutput, SdtmParams};
pub use trajectory::{generate_trajectory, TrajectoryConfig};
