//! Prediction through token generation at desk scale.
//!
//! A tiny decoder-only transformer is trained to emit task answers as
//! tokens. Scheduled sampling gradually replaces gold conditioning tokens
//! with the model's own, a task adapter maps generated-token hidden states to
//! class distributions or numbers, and the writer (token cross-entropy) and
//! director (adapter) losses are combined with the writer-director alignment
//! loss. A MINE pipeline compares how much target information survives in
//! pooled versus generated-token representations.

pub mod adapters;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod math;
pub mod mi;
pub mod model;
pub mod sampling;

pub use error::{Error, Result};
