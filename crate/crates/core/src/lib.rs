//! Core algorithms for edge-cloud collaborative recommendation with
//! per-user binary subnet masks ("diets").
//!
//! The cloud holds a frozen sequential recommender and, per user, generates a
//! set of per-layer binary masks from that user's recent interactions. Only
//! the masks travel to the edge, where they select a subnet of the shared
//! frozen weights for local reranking. This crate contains everything that is
//! pure computation: the tensor/autodiff engine, the two backbone
//! architectures, the mask generators, the training loop, the mask wire
//! format, cost accounting, dataset transforms, and ranking metrics.
//!
//! The crate is `no_std` (with `alloc`) so the edge-side pieces — decoding a
//! mask message, applying it to frozen weights, running masked inference —
//! can be embedded on constrained targets. All transcendental math goes
//! through [`libm`] rather than the platform's libm, so results are
//! bit-identical across platforms and feature configurations. File IO, the
//! CLI, and report emission live in the companion `diet-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod dietgen;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use graph::{Binding, Graph, NodeId};
pub use rng::Rng;
pub use tensor::Tensor;
