//! Periodic positional encodings for sequence models, plus everything needed
//! to compare them end to end on a desk-scale machine: absolute encoding
//! tables, rotary block transforms, a reverse-mode autodiff engine, an
//! encoder-decoder transformer, a word-level data pipeline, BLEU/accuracy
//! metrics, a cross-validation training harness, and quantitative probes of
//! the encoding functions themselves.
//!
//! Four encoding kernels are supported, selected by [`PeriodicKind`] and
//! named `sin`, `tri`, `sqw`, `saw` everywhere a string identifier is
//! expected. All numeric kernels are generic over the scalar type via
//! `num-traits`; `f64` is the reference precision and the type the training
//! stack instantiates, with `f32` producible by final rounding.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod pe;
pub mod rope;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernels::{phi, psi, wrap, Angle, PeriodicKind};
pub use scalar::Scalar;

/// Double-precision tensor, the type the training stack works in.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision positional-encoding table.
pub type PeTable64 = pe::PeTable<f64>;
/// Single-precision positional-encoding table (entries computed in `f64`,
/// rounded once at the end).
pub type PeTable32 = pe::PeTable<f32>;
/// Double-precision model state, the default for training.
pub type ModelState64 = model::ModelState<f64>;
