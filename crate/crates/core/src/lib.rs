//! Structured state space (S4) decoder building blocks.
//!
//! Everything in this crate is pure computation over `alloc` and runs
//! without `std`:
//!
//! - [`ssm`]: dense linear state space reference (bilinear discretization,
//!   recurrence, kernel materialization, causal convolution).
//! - [`s4`]: the DPLR-parameterized S4 layer with convolutional and
//!   recurrent forward passes, and its kernel gradient.
//! - [`autodiff`]: a define-by-run reverse-mode tape over dense tensors.
//! - [`decoder`]: the S4 decoder stack and the Transformer baseline, in
//!   teacher-forced and incremental modes.
//! - [`optim`]: AdamW with warmup and exponential decay.
//! - [`search`]: greedy and beam decoding over any incremental model.
//! - [`tasks`] and [`metrics`]: synthetic seq2seq datasets and error rates.
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod fft;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod num;
pub mod optim;
pub mod params;
pub mod s4;
pub mod search;
pub mod ssm;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use num::Real;
