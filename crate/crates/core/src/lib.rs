//! Universal-codebook vector quantization for small neural networks.
//!
//! One frozen codebook is sampled from a kernel density estimate of weight
//! sub-vectors pooled across several networks. Each network is then
//! compressed by learning soft assignments over its nearest codewords and
//! progressively freezing them to one-hot choices.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! command line and experiment presets live in the `uvq` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assignment;
pub mod codebook;
pub mod data;
mod error;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pnc;
pub mod rng;
pub mod storage;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
