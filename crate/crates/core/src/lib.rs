//! Hybrid teacher-forcing / free-running training for small autoregressive
//! token models, with the diagnostics used to measure exposure bias.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`]: dense tensors and a per-step
//!   reverse-mode tape, plus finite-difference verification.
//! * [`model`], [`decode`], [`checkpoint`]: a tiny decoder-only transformer,
//!   teacher-forced and free-running decoding, and the binary checkpoint format.
//! * [`losses`]: teacher-forcing and free-running losses and their weighted total.
//! * [`trainer`]: the hybrid training step, prompt protection, and the
//!   EOS-driven iteration scheduler.
//! * [`tasks`]: synthetic speech-like token tasks and sequence metrics.
//! * [`diagnostics`]: accuracy gaps, premature-EOS histograms, CSV and SVG output.
//! * [`config`], [`experiment`]: serializable run configuration and end-to-end
//!   train/evaluate runs.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod gradsuite;
mod kernels;
pub mod losses;
pub mod model;
pub mod par;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, EOS, SOS};
pub use tape::{GradTape, Var};
pub use tensor::{Scalar, Tensor};
