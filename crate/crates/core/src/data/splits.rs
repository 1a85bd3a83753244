use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{streams, RngState};

/// Exact per-split sizes and train-set positive count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: usize,
    pub train_pos: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitPlan {
    /// Dev and test take the given fractions of `n` (rounded) and are fully
    /// balanced; the rest is train with `train_pos_frac` positives.
    pub fn from_fractions(n: usize, dev_frac: f64, test_frac: f64, train_pos_frac: f64) -> Result<Self> {
        let dev = (n as f64 * dev_frac).round() as usize;
        let test = (n as f64 * test_frac).round() as usize;
        Self::from_sizes(n.saturating_sub(dev + test), dev, test, train_pos_frac, n)
    }

    pub fn from_sizes(train: usize, dev: usize, test: usize, train_pos_frac: f64, n: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_pos_frac) {
            return Err(Error::input(format!("train positive fraction {train_pos_frac} outside [0, 1]")));
        }
        if dev % 2 == 1 || test % 2 == 1 {
            return Err(Error::input(format!(
                "balanced dev/test need even sizes, got dev={dev} test={test}"
            )));
        }
        if train == 0 || train + dev + test != n {
            return Err(Error::input(format!(
                "cannot split {n} samples into train={train} dev={dev} test={test}"
            )));
        }
        Ok(Self {
            train,
            train_pos: (train as f64 * train_pos_frac).round() as usize,
            dev,
            test,
        })
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }

    pub fn positives(&self) -> usize {
        self.train_pos + self.dev / 2 + self.test / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Stratified assignment of labelled items to splits: dev and test draw
/// `size/2` items from each class, train takes everything left.
pub fn make_splits(labels: &[u8], dev: usize, test: usize, seed: u64) -> Result<Vec<Split>> {
    if dev % 2 == 1 || test % 2 == 1 {
        return Err(Error::input("balanced dev/test need even sizes"));
    }
    let mut rng = RngState::with_stream(seed, streams::SPLIT);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let need = (dev + test) / 2;
    if pos.len() < need || neg.len() < need {
        return Err(Error::input(format!(
            "need {need} items of each class for balanced splits, have {} positive / {} negative",
            pos.len(),
            neg.len()
        )));
    }
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut out = vec![Split::Train; labels.len()];
    for class in [&pos, &neg] {
        for &i in &class[..dev / 2] {
            out[i] = Split::Dev;
        }
        for &i in &class[dev / 2..need] {
            out[i] = Split::Test;
        }
    }
    Ok(out)
}
