//! Lateral super-resolution for sparsely acquired ultrasound images.
//!
//! Beamlines are decimated by 2 or 4, restored by cubic convolution, and the
//! interpolated image is refined by a small residual network trained with a
//! masked logarithmic loss. Everything runs on the CPU in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod netmath;
pub mod parallel;
pub mod resample;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use image::{decimate, line_mask, LineMask, SamplingScheme, UsImage};
pub use model::{ModelConfig, SrModel};
pub use resample::{keys_kernel, upsample_cubic, KernelParams, Upsampler};
