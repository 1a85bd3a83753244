use serde::{Deserialize, Serialize};

use super::{caption_target, caption_words, reward, Captioner, DecodeConfig, Decoded};
use crate::data::{CaptionSample, MemeSample, RegionFeature};
use crate::error::{Error, Result};
use crate::metrics::IdfTable;
use crate::numerics::{streams, AdamConfig, AdamState, Gradients, Graph, ParamStore, RngState};
use crate::text::vocab::BOS;
use crate::text::{normalize_words, Vocab};
use crate::train::{BatchSampler, LogRecord, Schedule};

/// A caption-corpus image prepared for training: the canonical reference as
/// the cross-entropy target, every reference as normalized words for rewards.
#[derive(Clone, Debug)]
pub struct CaptionExample {
    pub id: String,
    pub regions: Vec<RegionFeature>,
    pub target: Vec<u32>,
    pub refs: Vec<Vec<String>>,
}

impl CaptionExample {
    pub fn from_sample(s: &CaptionSample, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let canonical = s
            .references
            .first()
            .ok_or_else(|| Error::input(format!("image {} has no references", s.id)))?;
        Ok(Self {
            id: s.id.clone(),
            regions: s.regions.clone(),
            target: caption_target(canonical, vocab, max_len)?,
            refs: s.references.iter().map(|r| normalize_words(r)).collect(),
        })
    }

    pub fn idf(data: &[CaptionExample]) -> Result<IdfTable<String>> {
        let corpus: Vec<Vec<Vec<String>>> = data.iter().map(|e| e.refs.clone()).collect();
        IdfTable::build(&corpus)
    }
}

fn training_graph(model: &Captioner, sched: &Schedule, step: usize) -> Graph {
    if model.cfg.dropout > 0.0 {
        Graph::training(model.cfg.dropout, sched.dropout_rng(step))
    } else {
        Graph::new()
    }
}

/// Cross-entropy training on the canonical references.
pub fn train_xe(
    model: &Captioner,
    store: &mut ParamStore,
    data: &[CaptionExample],
    sched: &Schedule,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    sched.validate()?;
    if data.is_empty() {
        return Err(Error::input("empty caption corpus"));
    }
    let mut adam = AdamState::new(store, AdamConfig::default(), sched.lr_schedule());
    let mut sampler = BatchSampler::new(data.len(), sched.seed);
    let mut log = Vec::with_capacity(sched.steps);
    for step in 1..=sched.steps {
        let batch: Vec<(&[RegionFeature], &[u32])> = sampler
            .next_batch(sched.batch_size)
            .into_iter()
            .map(|i| (data[i].regions.as_slice(), data[i].target.as_slice()))
            .collect();
        let mut g = training_graph(model, sched, step);
        let loss = model.xe_loss(&mut g, store, &batch)?;
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

/// One self-critical update's ingredients.
#[derive(Debug)]
pub struct ScstStep {
    /// `mean_i −A_i · log p(sampled_i)`.
    pub surrogate: f64,
    pub sample_rewards: Vec<f64>,
    pub greedy_rewards: Vec<f64>,
    pub samples: Vec<Decoded>,
    pub grads: Gradients,
}

impl ScstStep {
    pub fn advantages(&self) -> Vec<f64> {
        self.sample_rewards
            .iter()
            .zip(&self.greedy_rewards)
            .map(|(s, g)| s - g)
            .collect()
    }
}

/// Samples one caption per image and decodes the greedy baseline, then
/// differentiates `−A · log p(sample)` with the advantage held constant.
pub fn scst_step(
    model: &Captioner,
    store: &ParamStore,
    batch: &[&CaptionExample],
    vocab: &Vocab,
    idf: &IdfTable<String>,
    rng: &mut RngState,
) -> Result<ScstStep> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let dc = DecodeConfig {
        max_len: model.cfg.max_len,
        temperature: 1.0,
    };
    let mut g = Graph::new();
    let mut terms = Vec::with_capacity(batch.len());
    let mut sample_rewards = Vec::with_capacity(batch.len());
    let mut greedy_rewards = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len());
    for ex in batch {
        let sampled = model.sample(store, &ex.regions, &dc, rng)?;
        let greedy = model.decode_greedy(store, &ex.regions, &dc)?;
        let rs = reward(&sampled, &ex.refs, vocab, idf)?;
        let rg = reward(&greedy, &ex.refs, vocab, idf)?;
        let nll = model.sequence_nll(&mut g, store, &ex.regions, &sampled.tokens)?;
        terms.push(g.scale(nll, rs - rg));
        sample_rewards.push(rs);
        greedy_rewards.push(rg);
        samples.push(sampled);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    let surrogate = g.scalar(loss);
    let grads = g.backward(loss)?.into_params();
    Ok(ScstStep {
        surrogate,
        sample_rewards,
        greedy_rewards,
        samples,
        grads,
    })
}

#[derive(Clone, Debug, Default)]
pub struct ScstReport {
    pub log: Vec<LogRecord>,
    /// Steps whose advantages were all zero, so no update was applied.
    pub skipped: usize,
    pub mean_sample_reward: Vec<f64>,
}

/// Self-critical fine-tuning. The logged loss is the surrogate. `on_step`
/// sees every log record together with the parameters after that step.
pub fn train_scst(
    model: &Captioner,
    store: &mut ParamStore,
    data: &[CaptionExample],
    vocab: &Vocab,
    idf: &IdfTable<String>,
    sched: &Schedule,
    mut on_step: impl FnMut(&LogRecord, &ParamStore) -> Result<()>,
) -> Result<ScstReport> {
    sched.validate()?;
    if data.is_empty() {
        return Err(Error::input("empty caption corpus"));
    }
    let mut adam = AdamState::new(store, AdamConfig::default(), sched.lr_schedule());
    let mut sampler = BatchSampler::new(data.len(), sched.seed);
    let mut rng = RngState::with_stream(sched.seed, streams::SAMPLE);
    let mut report = ScstReport::default();
    for step in 1..=sched.steps {
        let batch: Vec<&CaptionExample> = sampler
            .next_batch(sched.batch_size)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let out = scst_step(model, store, &batch, vocab, idf, &mut rng)?;
        let lr = adam.next_lr();
        if out.advantages().iter().all(|&a| a == 0.0) {
            report.skipped += 1;
        } else {
            adam.step(store, &out.grads)?;
        }
        let rec = LogRecord {
            step: step as u64,
            loss: out.surrogate,
            lr,
        };
        report
            .mean_sample_reward
            .push(out.sample_rewards.iter().sum::<f64>() / batch.len() as f64);
        on_step(&rec, store)?;
        report.log.push(rec);
    }
    Ok(report)
}

/// Teacher-forced argmax accuracy over every target token.
pub fn token_accuracy(model: &Captioner, store: &ParamStore, data: &[CaptionExample]) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for ex in data {
        let mut g = Graph::new();
        let mem = model.memory(&mut g, store, &ex.regions)?;
        let mut input = vec![BOS];
        input.extend_from_slice(&ex.target[..ex.target.len() - 1]);
        let logits = model.logits(&mut g, store, mem, &input)?;
        for (i, &t) in ex.target.iter().enumerate() {
            let row = g.value(logits).row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            hit += usize::from(best == t as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Evaluation("no target tokens".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Mean CIDEr-D of greedy captions over a corpus.
pub fn corpus_score(model: &Captioner, store: &ParamStore, data: &[CaptionExample], vocab: &Vocab, idf: &IdfTable<String>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Evaluation("empty caption corpus".into()));
    }
    let dc = DecodeConfig {
        max_len: model.cfg.max_len,
        temperature: 1.0,
    };
    let mut total = 0.0;
    for ex in data {
        let d = model.decode_greedy(store, &ex.regions, &dc)?;
        total += reward(&d, &ex.refs, vocab, idf)?;
    }
    Ok(total / data.len() as f64)
}

/// One line of the caption cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Greedy caption for every meme. Memes whose regions cannot be captioned keep
/// an empty caption and get an error on their record.
pub fn caption_dataset(model: &Captioner, store: &ParamStore, memes: &[MemeSample], vocab: &Vocab) -> Result<(Vec<MemeSample>, Vec<CaptionRecord>)> {
    let dc = DecodeConfig {
        max_len: model.cfg.max_len,
        temperature: 1.0,
    };
    let mut out = Vec::with_capacity(memes.len());
    let mut records = Vec::with_capacity(memes.len());
    for m in memes {
        let (caption, logprob, error) = match model.decode_greedy(store, &m.regions, &dc) {
            Ok(d) => (
                caption_words(d.words(), vocab)?.join(" "),
                d.logprob(),
                None,
            ),
            Err(e @ (Error::Input(_) | Error::Dimension { .. })) => (String::new(), 0.0, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        records.push(CaptionRecord {
            id: m.id.clone(),
            caption: caption.clone(),
            logprob,
            error,
        });
        out.push(MemeSample {
            caption: Some(caption),
            ..m.clone()
        });
    }
    Ok((out, records))
}
