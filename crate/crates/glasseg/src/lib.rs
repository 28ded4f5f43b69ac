//! Progressive glass segmentation at desk scale.
//!
//! The crate provides the network (a tiny backbone feeding four
//! discriminability-enhancement modules, fused high-to-low by
//! focus-and-exploration fusion blocks with three supervised heads), the
//! hybrid BCE + IoU training loss, the four evaluation metrics with
//! brute-force oracles in the test suite, dataset tooling including a
//! synthetic corpus generator, and a train/eval/predict CLI.
//!
//! All numerics are generic over the scalar type: training runs in `f32`,
//! gradient verification in `f64`.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete aliases for the common case.
pub type GlassNet32 = network::GlassNet<f32>;
pub type GlassNet64 = network::GlassNet<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
