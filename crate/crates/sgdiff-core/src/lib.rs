//! Algorithmic core for a scene-graph-conditioned cascaded diffusion model.
//!
//! Everything in this crate is pure computation: a reverse-mode autodiff tape,
//! the transformer/graph-convolution layers built on it, the diffusion process,
//! evaluation metrics, and the synthetic dataset generator. No IO lives here;
//! the companion `sgdiff` crate handles files, formats, and the CLI.
//!
//! All float math goes through `libm`, so results are bit-identical across
//! platforms. Reductions accumulate sequentially in index order for the same
//! reason.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod datagen;
pub mod diffusion;
pub mod element;
pub mod graphconv;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scenegraph;
pub mod swin;
pub mod tensor;
pub mod textenc;
pub mod unet;

pub use element::{Dtype, Element};
pub use params::{ParamStore, Session};
pub use rng::Prng;
pub use tensor::{Tape, TensorError, Var};
