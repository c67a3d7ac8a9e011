//! CU-Mamba image restoration: a U-Net whose blocks mix information with
//! selective state-space scans over pixels and over channels.

// `!(x > 0.0)` style checks reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod image_io;
pub mod layers;
pub mod metrics;
pub mod objective;
pub mod par;
pub mod params;
pub mod real;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
