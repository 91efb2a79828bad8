//! Desk-scale laboratory for source-data-free universal domain adaptation.
//!
//! Train a two-head classifier on a labeled source dataset, hand only the
//! model to an unlabeled target domain containing unknown classes, and adapt
//! it there: unknown-looking samples are pushed toward maximally uncertain
//! predictions while known-looking samples are aligned with the frozen
//! classifier heads, with every gradient verifiable against central finite
//! differences.

pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
