//! Minimal CPU layer library with explicit backward passes.
//!
//! Every layer is a pure function of a [`ParamStore`] and its input. The
//! backward pass takes `Option<&mut Grads>`: passing `None` propagates the
//! input gradient without touching any parameter gradient, which is how
//! frozen network parts are run.

pub mod conv;
pub mod gemm;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use conv::Conv2d;
pub use params::{EntryKind, Grads, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
