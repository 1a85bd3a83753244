//! Caption-augmented multimodal meme classification.
//!
//! The pipeline generates a caption from region features, fuses caption,
//! OCR text and regions with a transformer relation network, and scores
//! each meme as hateful or not. Everything runs on the small reverse-mode
//! engine in [`numerics`].

pub mod captioner;
pub mod data;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod text;
pub mod train;
pub mod trn;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, RngState, Tensor, Var};
