//! Dataset records, line-delimited JSON files, stratified splits and the
//! synthetic meme world.

mod io;
mod splits;
mod types;
mod world;

pub use io::{load_jsonl, load_memes, parse_jsonl, save_jsonl, save_memes};
pub use splits::{make_splits, Split, SplitPlan};
pub use types::{CaptionSample, MemeSample, Provenance, RegionFeature};
pub use world::{gen_synthetic, prototypes, Lexicon, Rule, SplitSizes, World, WorldConfig};
