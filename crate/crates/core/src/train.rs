//! Training schedules, batch sampling, step logs and the detector training loop.

use serde::{Deserialize, Serialize};

use crate::data::MemeSample;
use crate::embedding::{layout_meme, InputFlags, LayoutLimits};
use crate::error::{Error, Result};
use crate::numerics::{stable_hash, streams, AdamConfig, AdamState, Graph, LrSchedule, ParamStore, RngState};
use crate::text::{paraphrase_augment, ParaphraseConfig, Vocab};
use crate::trn::{Detector, Example};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear decay target reached at the last step; constant when unset.
    pub lr_end: Option<f64>,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            lr_end: None,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn lr_schedule(&self) -> LrSchedule {
        match self.lr_end {
            Some(end) => LrSchedule::Linear {
                start: self.lr,
                end,
                steps: self.steps as u64,
            },
            None => LrSchedule::Constant { lr: self.lr },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::input("batch_size and lr must be positive"));
        }
        Ok(())
    }

    /// Dropout stream for one step, independent of every other step.
    pub fn dropout_rng(&self, step: usize) -> RngState {
        RngState::with_stream(self.seed ^ stable_hash(&format!("step{step}")), streams::DROPOUT)
    }
}

/// One line of a training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Epoch-wise shuffled batches from the batch stream.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: RngState,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: RngState::with_stream(seed, streams::BATCH),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Lays out memes as detector examples. With augmentation on, each meme is
/// followed by its paraphrases; the count of memes that fell short of `k`
/// variants is returned alongside.
pub fn build_examples(
    memes: &[MemeSample],
    vocab: &Vocab,
    flags: InputFlags,
    limits: &LayoutLimits,
    augment: Option<&ParaphraseConfig>,
) -> Result<(Vec<Example>, usize)> {
    let mut out = Vec::with_capacity(memes.len());
    let mut short = 0;
    let mut push = |m: &MemeSample| -> Result<()> {
        out.push(Example {
            id: m.id.clone(),
            layout: layout_meme(m, vocab, flags, limits)?,
            regions: m.regions.clone(),
            label: m.label,
        });
        Ok(())
    };
    for m in memes {
        push(m)?;
        if let (true, Some(cfg)) = (flags.use_augmentation, augment) {
            let aug = paraphrase_augment(m, cfg);
            short += usize::from(aug.warning);
            for v in aug.samples.iter().filter(|v| v.id != m.id) {
                push(v)?;
            }
        }
    }
    Ok((out, short))
}

/// Adam on mean BCE over sampled batches. Calls `on_log` after every step.
pub fn train_detector(
    model: &Detector,
    store: &mut ParamStore,
    data: &[Example],
    sched: &Schedule,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    sched.validate()?;
    if data.is_empty() {
        return Err(Error::input("no training examples"));
    }
    let mut adam = AdamState::new(store, AdamConfig::default(), sched.lr_schedule());
    let mut sampler = BatchSampler::new(data.len(), sched.seed);
    let mut log = Vec::with_capacity(sched.steps);
    for step in 1..=sched.steps {
        let idx = sampler.next_batch(sched.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        let mut g = if model.cfg.dropout > 0.0 {
            Graph::training(model.cfg.dropout, sched.dropout_rng(step))
        } else {
            Graph::new()
        };
        let loss = model.batch_loss(&mut g, store, &batch)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss)?.into_params();
        let lr = adam.next_lr();
        adam.step(store, &grads)?;
        let rec = LogRecord {
            step: step as u64,
            loss: value,
            lr,
        };
        on_log(&rec);
        log.push(rec);
    }
    Ok(log)
}
