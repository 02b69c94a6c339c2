//! Incremental-transfer learning for multi-site binary segmentation.
//!
//! A shared encoder and two decoder heads are trained one site at a time.
//! The target decoder learns the current site; the source decoder is a
//! frozen copy of the previous phase's target decoder and, together with a
//! small exemplar memory of earlier sites, keeps the encoder compatible with
//! what was learned before.

pub mod data;
pub mod engine;
pub mod error;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;

pub use error::{ItlError, Result};
