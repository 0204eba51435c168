//! Hierarchical co-attention propagation network for zero-shot video object
//! segmentation, desk scale: a minimal reverse-mode tensor engine, the
//! three-stream encoder with the PCM/CCM cascade, the GAC bridge, the
//! ASPP/contour decoder, synthetic sequence generation with exact optical
//! flow, pair-propagation inference, and DAVIS-style J/F/T evaluation.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
