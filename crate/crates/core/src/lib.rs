//! Sparsity-invariant convolution stack for LiDAR depth completion.
//!
//! The crate provides, bottom to top:
//!
//! * [`tensor`] — a minimal dense NCHW tensor with the convolution kernels
//!   every layer is built from,
//! * [`autodiff`] — a Wengert-tape reverse-mode differentiator over those
//!   kernels, plus a finite-difference gradient checker,
//! * [`layers`] — sparsity-invariant convolution with validity-mask
//!   propagation, the binary switch layer (SISL), the sparsity-invariant
//!   residual bottleneck, and the fusion blocks,
//! * [`network`] — the dual-encoder/single-decoder depth-completion network
//!   assembled from the layers, with checkpoint I/O,
//! * [`training`] — masked-MSE + smoothness loss, Adam/AdamW, plateau
//!   learning-rate scheduling, augmentation, and the training loop,
//! * [`data`] — 16-bit depth-map PNG I/O, synthetic scan-line sample
//!   generation, and the four benchmark error metrics.
//!
//! The `sparseconv` binary exposes `complete`, `train`, `synth`, `eval` and
//! `mask-report` subcommands on top of the library.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
