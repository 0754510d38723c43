//! Open-set adversarial defense laboratory.
//!
//! Implements the OSDN-CAML defense: an adversarially trained encoder with
//! dual-attentive feature denoising, decoder reconstruction, rotation
//! self-supervision and clean-adversarial mutual learning, plus OpenMax
//! open-set inference and the attack/evaluation protocol around it.
//!
//! The crate is organized as:
//! - [`autograd`] — f64 reverse-mode autodiff the networks are built on
//! - [`data`] — dataset splits, the synthetic toy set, rotation batches
//! - [`attacks`] — FGSM, PGD and the rectangular occlusion attack
//! - [`dadl`] — dual-attentive denoising layer
//! - [`networks`] — the five sub-networks and substitute architectures
//! - [`training`] — loss functions and the alternating main/peer loop
//! - [`openmax`] — Weibull-calibrated open-set inference
//! - [`evaluation`] — closed-set accuracy, AUC-ROC, macro-F1, black-box runs
//! - [`config`] / [`checkpoint`] / [`report`] — run plumbing

pub mod attacks;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dadl;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod openmax;
pub mod pipeline;
pub mod report;
pub mod training;

pub use error::{Error, Result};
