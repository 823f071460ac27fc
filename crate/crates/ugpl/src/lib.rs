//! Uncertainty-guided progressive learning for single-channel image
//! classification, end to end on CPU in 64-bit floats.
//!
//! The pipeline: a residual global classifier with an evidential head
//! produces class logits and a per-pixel uncertainty map; high-uncertainty
//! patches are extracted with greedy non-maximum suppression; a local
//! refinement network classifies each patch with a confidence score; and an
//! adaptive fusion module combines global and local predictions. Training
//! optimizes a seven-component objective. Everything is built on an in-crate
//! reverse-mode autodiff tape with a finite-difference verification harness.

pub mod ablate;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod evidential;
pub mod fusion;
pub mod global_model;
pub mod error;
pub mod layers;
pub mod local_model;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod patch;
pub mod pgm;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod verify;
pub mod tensor;
