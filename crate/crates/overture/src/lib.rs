//! Proactive reception decision stack.
//!
//! `overture` decides when a receptionist robot should initiate an
//! interaction, whom to address, and which multi-modal action (utterance,
//! facial expression, body motion) to perform, from a stream of per-frame
//! detected objects.
//!
//! The pipeline:
//!
//! 1. [`tokens`] turns detected objects into a fixed M x N grid of visual
//!    tokens over the latest N frames (persons first, padded, frame-ordered).
//! 2. [`actions`] maintains the codebook of multi-modal actions plus a
//!    reserved NULL entry and encodes each into a semantic vector.
//! 3. [`model`] runs a frame-causal masked transformer over the token grid
//!    with three heads: trigger probability, per-token target probability,
//!    and a distribution over the action codebook.
//! 4. [`sim`] generates deterministic synthetic lobby episodes with
//!    ground-truth annotations, used for training and verification.
//! 5. [`clips`] and [`train`] build supervised clips, run the gated
//!    multi-task loss, and calibrate decision thresholds.
//! 6. [`infer`] is the streaming engine with the three inference modes
//!    (trigger-only, actor-only, trigger-actor).
//! 7. [`metrics`] is the clip-level precision/recall/AP/AR evaluation suite.
//!
//! Everything numeric sits on [`tensor`], a minimal dense-tensor substrate
//! with reverse-mode gradients and a finite-difference checker.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `overture` binary (`sim-gen`, `train`, `eval`, `infer`, `inspect`).

pub mod actions;
pub mod checkpoint;
pub mod cli;
pub mod clips;
pub mod error;
pub mod formats;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod sim;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
