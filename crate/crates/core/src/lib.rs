//! Vision Transformer image classification for cooking-state recognition.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] holds the dense tensor type and a tape-based reverse-mode
//!   autodiff engine, generic over `f32` (training) and `f64` (verification).
//! * [`vit`] builds the ViT forward pass on top of the tape.
//! * [`data`] and [`augment`] prepare images, [`train`] runs the SGD loop,
//!   [`eval`] produces confusion matrices and per-class reports.
//! * [`checkpoint`] reads and writes the `VITC` weight format.
//! * [`rollout`] turns captured attention into relevance heatmaps.
//!
//! Data-parallel loops go through [`parallel`]; with the `parallel` feature
//! disabled everything runs sequentially and produces identical results.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod parallel;
pub mod rng;
pub mod rollout;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
pub use vit::{ModelParams, ViTConfig};
