//! Lane-wise intersection digital twins.
//!
//! The crate is organised bottom-up:
//!
//! - [`domain`]: waveforms, turning-movement ratios, driving behaviour,
//!   topologies and simulation records, plus bucket arithmetic.
//! - [`template`]: the fixed Exit and Inflow graph templates every
//!   intersection is padded into.
//! - [`signal`]: ring-and-barrier timing plan sampling and rendering.
//! - [`sim`]: a mesoscopic queue simulator that produces records.
//! - [`graphs`]: record → Exit / Inflow simulation graph builders.
//! - [`ndiff`]: dense tensors with a reverse-mode tape and Adam.
//! - [`mpnn`]: GAT / GCN / SAGE message passing and causal temporal
//!   self-attention.
//! - [`twins`]: auto-encoder assembly, masked loss and imputation.
//! - [`harness`]: training with early stopping, metrics, baselines,
//!   latent export and the linear surrogate explainer.
//! - [`checks`]: the finite-difference gradient suite.
//!
//! Everything here is `no_std` + `alloc`; file formats and the CLI live
//! in the companion `lanetwin` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod checks;
pub mod domain;
pub mod error;
pub mod graphs;
pub mod harness;
mod math;
pub mod mpnn;
pub mod ndiff;
pub mod signal;
pub mod sim;
pub mod template;
pub mod twins;

pub use error::{Error, Result};

/// Canonical observation window, in buckets.
pub const WINDOW: usize = 80;
/// Canonical bucket width, in seconds.
pub const BUCKET_SECONDS: u32 = 5;
/// Per-bucket saturation cap for detector counts at 5 s resolution.
pub const SATURATION_CAP: u32 = 8;
/// Width of the per-bucket edge feature: 12 tmc + 9 drv + 8 signal phases.
pub const EDGE_FEATURE_DIM: usize = 29;
