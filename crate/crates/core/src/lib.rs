//! Few-shot classification-weight generation with a graph-based denoising
//! autoencoder.
//!
//! The crate is organized around a small reverse-mode tensor engine
//! ([`tensor`]), a cosine feature classifier with weight imprinting
//! ([`classifier`]), a nearest-neighbor class graph ([`graph`]), the
//! two-layer GNN/MLP weight denoiser ([`model`]), and the episodic
//! training ([`trainer`]) and evaluation ([`eval`]) loops that drive it.
//!
//! Everything here is pure computation over in-memory data: file formats,
//! the CLI, and parallel evaluation drivers live in the companion `wdae-cli`
//! crate. The crate is `no_std` (alloc required); all randomness flows
//! through explicitly seeded [`rng`] streams.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod classifier;
pub mod dataset;
pub mod eval;
pub mod fdcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

mod mathx;

pub use classifier::ClassifierWeights;
pub use dataset::{FeatureDataset, SyntheticConfig};
pub use graph::ClassGraph;
pub use model::{ModelConfig, Variant, WdaeModel};
pub use tensor::{Record, Tensor};
