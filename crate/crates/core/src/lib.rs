//! Augmentation by counterfactual explanation, at desk scale.
//!
//! The crate trains a small classifier on Two-Moons, trains a progressive
//! counterfactual explainer (a conditional GAN) around the frozen classifier,
//! fine-tunes the classifier on counterfactual augmentations with soft labels,
//! and uses the explainer's discriminator as an abstention head. Everything
//! needed to measure the effect (uncertainty metrics, OOD detection,
//! adversarial sweeps) lives alongside.

pub mod ace;
pub mod archive;
pub mod attacks;
pub mod classifier;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod pce;
pub mod selective;
pub mod tensor;

pub use error::{Error, Result};
