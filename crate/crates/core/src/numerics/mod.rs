//! Deterministic f64 tensor engine: reverse-mode tape, Adam, seeded RNG streams
//! and the parameter checkpoint format.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState, LrSchedule};
pub use graph::{GradTable, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::{stable_hash, RngState};
pub use tensor::Tensor;

/// Stream ids for the counter-based RNG, one per consumer.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const WORLD: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const PARAPHRASE: u64 = 7;
    pub const VOCAB: u64 = 8;
}
