//! Temporal-difference video-text contrastive learning with three-way
//! (subject / action / object) feature disentanglement.
//!
//! The pipeline: a procedural atomic-action video corpus ([`synth`]), a
//! curation stage that keeps only single-action annotations ([`curation`]),
//! frozen deterministic frame/text encoders with trainable branch heads
//! ([`encoders`]), a temporal difference transformer ([`temporal`]),
//! subject/action/object disentanglement with orthogonality constraints
//! ([`disentangle`]), class-indexed feature banks with a recombination loss
//! ([`bank`]), the composite contrastive objective ([`objective`]), a
//! deterministic trainer with finite-difference gradient verification
//! ([`trainer`]), and retrieval/probe evaluations ([`eval`]).
//!
//! Start with the runnable examples (`cargo run --example <name>`), or the
//! `triad` binary for the end-to-end pipeline.

pub mod autodiff;
pub mod bank;
pub mod cli;
pub mod config;
pub mod curation;
pub mod disentangle;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod objective;
pub mod synth;
pub mod temporal;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use objective::{LossBreakdown, LossWeights};
pub use synth::{DatasetManifest, Triplet, VideoSample, Vocabularies};
