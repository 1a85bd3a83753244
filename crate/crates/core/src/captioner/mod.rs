//! Region-conditioned caption generator: a pooled image feature plus
//! per-region memory rows feed a causal transformer decoder with
//! cross-attention. Trained with teacher-forced cross-entropy, then
//! fine-tuned with self-critical policy gradients against CIDEr-D.

mod train;

pub use train::{
    caption_dataset, corpus_score, scst_step, token_accuracy, train_scst, train_xe, CaptionExample, CaptionRecord, ScstReport,
    ScstStep,
};

use serde::{Deserialize, Serialize};

use crate::data::RegionFeature;
use crate::embedding::VisualEmbedder;
use crate::error::{Error, Result};
use crate::metrics::{cider_d, IdfTable};
use crate::numerics::{Graph, ParamId, ParamStore, RngState, Tensor, Var};
use crate::text::vocab::{BOS, EOS};
use crate::text::{detokenize, normalize_words, wordpiece_tokenize, Vocab};
use crate::trn::attention::{AttentionSublayer, AttnMask, FeedForward, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_o: usize,
    /// Longest caption in tokens, `[EOS]` included.
    pub max_len: usize,
    pub max_regions: usize,
    pub dropout: f64,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 2,
            d_o: 32,
            max_len: 24,
            max_regions: 10,
            dropout: 0.1,
        }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::input(format!("captioner width {} must be a positive multiple of heads {}", self.d, self.heads)));
        }
        if self.max_len == 0 || self.max_regions == 0 || self.d_o == 0 {
            return Err(Error::input("captioner max_len, max_regions and d_o must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub temperature: f64,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::input("decode needs max_len >= 1 and temperature > 0"));
        }
        Ok(())
    }
}

/// A decoded token sequence (ending in `[EOS]` unless cut at `max_len`) with
/// the log-probability of each chosen token.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub step_logprobs: Vec<f64>,
}

impl Decoded {
    pub fn logprob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }

    /// Tokens before `[EOS]`.
    pub fn words(&self) -> &[u32] {
        match self.tokens.iter().position(|&t| t == EOS) {
            Some(i) => &self.tokens[..i],
            None => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttentionSublayer,
    cross_attn: AttentionSublayer,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub cfg: CaptionerConfig,
    pool: Linear,
    pool_ln: LayerNorm,
    regions: VisualEmbedder,
    word: ParamId,
    position: ParamId,
    emb_ln: LayerNorm,
    layers: Vec<DecoderLayer>,
    out: Linear,
}

fn log_softmax_row(row: &[f64], inv_temp: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|x| x * inv_temp).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + scaled.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    scaled.iter().map(|x| x - lse).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Captioner {
    pub fn new(store: &mut ParamStore, cfg: &CaptionerConfig, vocab_size: usize, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("cap.layer{i}");
                Ok(DecoderLayer {
                    self_attn: AttentionSublayer::new(store, &format!("{p}.self"), d, cfg.heads, rng)?,
                    cross_attn: AttentionSublayer::new(store, &format!("{p}.cross"), d, cfg.heads, rng)?,
                    ffn: FeedForward::new(store, &p, d, rng),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            pool: Linear::new(store, "cap.pool", cfg.d_o, d, rng),
            pool_ln: LayerNorm::new(store, "cap.pool.ln", d),
            regions: VisualEmbedder::new(store, "cap.vis", cfg.d_o, d, rng),
            word: store.normal("cap.word", &[vocab_size, d], 1.0, rng),
            position: store.normal("cap.position", &[cfg.max_len, d], 1.0, rng),
            emb_ln: LayerNorm::new(store, "cap.emb.ln", d),
            layers,
            out: Linear::new(store, "cap.out", d, vocab_size, rng),
        })
    }

    /// Memory rows: the pooled image feature, then one row per region.
    pub fn memory(&self, g: &mut Graph, store: &ParamStore, regions: &[RegionFeature]) -> Result<Var> {
        let regions = &regions[..regions.len().min(self.cfg.max_regions)];
        if regions.is_empty() {
            return Err(Error::input("captioning needs at least one region"));
        }
        let mut feats = Vec::with_capacity(regions.len() * self.cfg.d_o);
        for r in regions {
            r.validate(Some(self.cfg.d_o))?;
            feats.extend_from_slice(&r.feat);
        }
        let f = g.input(Tensor::new(vec![regions.len(), self.cfg.d_o], feats)?);
        let pooled = g.mean_rows(f)?;
        let pooled = self.pool.forward(g, store, pooled)?;
        let pooled = self.pool_ln.forward(g, store, pooled)?;
        let rows = self.regions.embed(g, store, regions)?;
        g.concat(&[pooled, rows], 0)
    }

    /// Next-token logits (`n × V`) for each prefix of `input`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, memory: Var, input: &[u32]) -> Result<Var> {
        if input.is_empty() || input.len() > self.cfg.max_len {
            return Err(Error::input(format!(
                "decoder input of {} tokens outside 1..={}",
                input.len(),
                self.cfg.max_len
            )));
        }
        let ids: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..input.len()).collect();
        let w = g.param(store, self.word);
        let p = g.param(store, self.position);
        let w = g.embedding(w, &ids)?;
        let p = g.embedding(p, &positions)?;
        let x = g.add(w, p)?;
        let mut h = self.emb_ln.forward(g, store, x)?;
        let mem_len = g.value(memory).dims2()?.0;
        let mem_mask = AttnMask::all(mem_len);
        for l in &self.layers {
            h = l.self_attn.forward(g, store, h, h, &AttnMask::Causal)?;
            h = l.cross_attn.forward(g, store, h, memory, &mem_mask)?;
            h = l.ffn.forward(g, store, h)?;
        }
        self.out.forward(g, store, h)
    }

    /// `Σ −log p(target_i | [BOS], target_<i)` for one image.
    pub fn sequence_nll(&self, g: &mut Graph, store: &ParamStore, regions: &[RegionFeature], target: &[u32]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::input("empty caption target"));
        }
        if target.len() > self.cfg.max_len {
            return Err(Error::input(format!(
                "caption of {} tokens exceeds max_len {}",
                target.len(),
                self.cfg.max_len
            )));
        }
        let memory = self.memory(g, store, regions)?;
        let mut input = vec![BOS];
        input.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.logits(g, store, memory, &input)?;
        let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        g.cross_entropy(logits, &targets)
    }

    /// Teacher-forced cross-entropy, summed per caption and averaged over the batch.
    /// Targets must end with `[EOS]`.
    pub fn xe_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[(&[RegionFeature], &[u32])]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for (regions, target) in batch {
            if target.last() != Some(&EOS) {
                return Err(Error::input("caption target must end with [EOS]"));
            }
            losses.push(self.sequence_nll(g, store, regions, target)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    /// Teacher-forced per-step log-probabilities of `tokens` at `temperature`.
    pub fn score(&self, store: &ParamStore, regions: &[RegionFeature], tokens: &[u32], temperature: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let memory = self.memory(&mut g, store, regions)?;
        let mut input = vec![BOS];
        input.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
        let logits = self.logits(&mut g, store, memory, &input)?;
        let t = g.value(logits);
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| log_softmax_row(t.row(i), 1.0 / temperature)[tok as usize])
            .collect())
    }

    fn decode(&self, store: &ParamStore, regions: &[RegionFeature], cfg: &DecodeConfig, mut rng: Option<&mut RngState>) -> Result<Decoded> {
        cfg.validate()?;
        let max_len = cfg.max_len.min(self.cfg.max_len);
        let mut g = Graph::new();
        let memory = self.memory(&mut g, store, regions)?;
        let mut input = vec![BOS];
        let mut out = Decoded {
            tokens: Vec::new(),
            step_logprobs: Vec::new(),
        };
        while out.tokens.len() < max_len {
            let mut g_step = Graph::new();
            let mem = g_step.input(g.value(memory).clone());
            let logits = self.logits(&mut g_step, store, mem, &input)?;
            let row = g_step.value(logits).row(input.len() - 1);
            let (tok, lp) = match rng.as_deref_mut() {
                None => {
                    let lp = log_softmax_row(row, 1.0);
                    let t = argmax(&lp);
                    (t, lp[t])
                }
                Some(r) => {
                    let lp = log_softmax_row(row, 1.0 / cfg.temperature);
                    let u = r.uniform();
                    let mut acc = 0.0;
                    let mut t = lp.len() - 1;
                    for (i, l) in lp.iter().enumerate() {
                        acc += l.exp();
                        if u < acc {
                            t = i;
                            break;
                        }
                    }
                    (t, lp[t])
                }
            };
            out.tokens.push(tok as u32);
            out.step_logprobs.push(lp);
            if tok as u32 == EOS {
                break;
            }
            input.push(tok as u32);
        }
        Ok(out)
    }

    /// Argmax decoding until `[EOS]` or `max_len`.
    pub fn decode_greedy(&self, store: &ParamStore, regions: &[RegionFeature], cfg: &DecodeConfig) -> Result<Decoded> {
        self.decode(store, regions, cfg, None)
    }

    /// Multinomial decoding at `cfg.temperature`; log-probabilities are under
    /// the tempered distribution.
    pub fn sample(&self, store: &ParamStore, regions: &[RegionFeature], cfg: &DecodeConfig, rng: &mut RngState) -> Result<Decoded> {
        self.decode(store, regions, cfg, Some(rng))
    }
}

/// Tokenized caption target with a trailing `[EOS]`.
pub fn caption_target(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<u32>> {
    let mut ids = wordpiece_tokenize(text, vocab, usize::MAX).ids;
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(Error::input(format!(
            "caption '{text}' needs {} tokens, max_len is {max_len}",
            ids.len()
        )));
    }
    Ok(ids)
}

/// Normalized words of a decoded caption, for CIDEr-D.
pub fn caption_words(tokens: &[u32], vocab: &Vocab) -> Result<Vec<String>> {
    Ok(normalize_words(&detokenize(tokens, vocab)?))
}

/// CIDEr-D of a decoded caption against word-level references.
pub fn reward(decoded: &Decoded, refs: &[Vec<String>], vocab: &Vocab, idf: &IdfTable<String>) -> Result<f64> {
    Ok(cider_d(&caption_words(decoded.words(), vocab)?, refs, idf))
}
