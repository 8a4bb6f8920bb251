//! Exemplar-free continual imitation learning on a flow-matching policy.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece of
//! the engine: a small reverse-mode autodiff tensor library, the Adam
//! optimizer, a reproducible PRNG, the flow-matching policy, the adapter /
//! discriminator banks with z-score driven expansion, a synthetic planar task
//! suite with scripted experts, and closed-loop evaluation metrics.
//!
//! File formats, configuration files and the command line live in the
//! `clare-cli` companion crate.

#![no_std]
#![deny(rustdoc::broken_intra_doc_links)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod clare;
mod error;
pub mod eval;
pub mod math;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
