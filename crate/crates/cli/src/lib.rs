//! Command-line pipeline around `memetrn`: data generation, captioner and
//! detector training, captioning, prediction, evaluation and the input ablation grid.

pub mod commands;
pub mod config;

pub use config::RunConfig;
