//! Contextual soft-prompt ("SoftSRV") synthetic data generation.
//!
//! A small decoder-only transformer is pretrained on a toy target
//! distribution and frozen. Trainable prompt parameterizations are fit so
//! that the frozen model reconstructs target sequences from a lossy context
//! vector; sampling from the trained prompts yields synthetic data, which is
//! post-processed, decontaminated and scored for distributional closeness.

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod embedder;
pub mod error;
pub mod generator;
pub mod grammar;
pub mod mauve;
pub mod optim;
pub mod pipeline;
pub mod postprocess;
pub mod records;
pub mod rng;
pub mod softsrv;
pub mod student;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
