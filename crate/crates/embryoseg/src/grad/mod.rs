//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is specialized for this pipeline: 3D convolutions (stride-1
//! same-padding, 2x strided down, 2x transposed up), PReLU, instance norm,
//! softmax/sigmoid heads, channel concat/select, align-corners trilinear
//! resampling, box crop / zero-pad-back, and soft Dice losses. Forward
//! kernels are plain functions so inference can run without a tape; the tape
//! wraps them and records analytic backward closures.
//!
//! All kernels are deterministic: every output element is written by exactly
//! one thread and reductions run in a fixed order, so results are bit-stable
//! across runs regardless of the rayon schedule.

pub mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
