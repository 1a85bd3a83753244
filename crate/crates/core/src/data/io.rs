//! Line-delimited JSON dataset files.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! exact rounding, so `save` followed by `load` is bit-exact.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::MemeSample;
use crate::error::{Error, Result};

/// Writes one JSON object per line.
pub fn save_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses one JSON object per nonblank line; errors carry the 1-based line number.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn save_memes(samples: &[MemeSample], path: impl AsRef<Path>) -> Result<()> {
    check_memes(samples)?;
    save_jsonl(samples, path)
}

/// Loads memes, rejecting labels outside {0, 1} and duplicate ids.
pub fn load_memes(path: impl AsRef<Path>) -> Result<Vec<MemeSample>> {
    let samples: Vec<MemeSample> = load_jsonl(path)?;
    check_memes(&samples)?;
    Ok(samples)
}

fn check_memes(samples: &[MemeSample]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in samples {
        if s.label > 1 {
            return Err(Error::Integrity(format!("sample {} has label {}", s.id, s.label)));
        }
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Integrity(format!("duplicate id {}", s.id)));
        }
    }
    Ok(())
}
