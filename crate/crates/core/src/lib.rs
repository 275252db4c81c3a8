//! Weakly supervised temporal action localization on precomputed two-modality
//! (appearance + motion) snippet features.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`] / [`optim`] / [`gradcheck`]: a minimal dense-tensor
//!   engine with tape-based reverse-mode differentiation and Adam, sized for
//!   desk-scale f64 experiments where every gradient can be finite-difference
//!   checked.
//! - [`data`]: video records, the on-disk feature/manifest formats, snippet
//!   sampling, and a synthetic two-modality benchmark generator with planted
//!   actions and planted cross-modal distractors.
//! - [`model`]: the two-stream network — per-modality cross-modal channel
//!   gates, dual attention heads, fusion, and the snippet classifier.
//! - [`losses`]: the training objectives (top-k MIL, co-activity ranking,
//!   mutual learning on attention tracks, background-opposition, sparsity).
//! - [`localize`]: attention thresholding, outer-inner proposal scoring and
//!   soft-NMS.
//! - [`eval`]: temporal-IoU matching, per-class average precision and mAP
//!   reports.
//! - [`pipeline`]: the seeded train/eval loops driven by one run config.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hash;
pub mod localize;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};
