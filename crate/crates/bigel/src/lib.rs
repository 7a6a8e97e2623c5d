//! BiGEL: behavior-informed graph embedding learning for multi-behavior
//! multi-task recommendation.
//!
//! The crate covers the full pipeline: interaction-log preprocessing and
//! temporal splitting, per-behavior and global graph construction, the
//! cascading forward pass with gated feedback and global context enhancement,
//! joint BPR + contrastive optimization with hand-derived gradients, Adam,
//! top-K ranking evaluation, and experiment orchestration (training, ablation,
//! sweeps, baselines).

pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objective;
pub mod optim;
pub mod runner;
pub mod synth;
pub mod train;
pub mod mat;

pub use error::{Error, Result};
