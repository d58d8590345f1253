//! Low-bit quantization engine: composite quantized layers with a
//! full-precision low-rank branch, randomized Hadamard rotation of the
//! low-bit branch, complexity-aware rank allocation, and learnable bias
//! alignment, exercised end-to-end on a built-in toy spatio-temporal
//! denoiser.

pub mod autodiff;
pub mod backbone;
pub mod calib;
pub mod checkpoint;
mod container;
pub mod error;
pub mod lba;
pub mod linalg;
pub mod pipeline;
pub mod qlayer;
pub mod quant;
pub mod rng;
pub mod stca;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{IntTensor, Tensor};
