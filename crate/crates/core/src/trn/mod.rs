//! Triplet-relation network: transformer encoders over OCR, caption and
//! region slots, read out at `[CLS]` into a two-way classifier.

pub mod attention;

use serde::{Deserialize, Serialize};

use self::attention::{AttnMask, Block, Linear};
use crate::data::RegionFeature;
use crate::embedding::{Embedder, InputSequence, LayoutLimits, SequenceLayout};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, RngState, Tensor, Var};

/// Lower clamp on probabilities inside the log of the BCE.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    OneStream,
    TwoStream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrnConfig {
    pub variant: Variant,
    pub d: usize,
    pub heads: usize,
    /// One-stream depth.
    pub layers: usize,
    pub text_layers: usize,
    pub visual_layers: usize,
    pub co_layers: usize,
    pub dropout: f64,
    pub d_o: usize,
    pub limits: LayoutLimits,
}

impl Default for TrnConfig {
    fn default() -> Self {
        Self {
            variant: Variant::OneStream,
            d: 64,
            heads: 4,
            layers: 2,
            text_layers: 2,
            visual_layers: 2,
            co_layers: 1,
            dropout: 0.1,
            d_o: 32,
            limits: LayoutLimits::default(),
        }
    }
}

impl TrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::input(format!("model width {} must be a positive multiple of heads {}", self.d, self.heads)));
        }
        if self.d_o == 0 {
            return Err(Error::input("d_o must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    OneStream(Vec<Block>),
    TwoStream {
        text: Vec<Block>,
        visual: Vec<Block>,
        /// `(text attends to visual, visual attends to text)` per layer.
        co: Vec<(Block, Block)>,
    },
}

/// Fully connected `d → 2` layer; the softmax gives `(p_non_hateful, p_hateful)`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut RngState) -> Self {
        Self {
            fc: Linear::new(store, "cls.fc", d, 2, rng),
        }
    }

    /// `1×2` class probabilities.
    pub fn probs(&self, g: &mut Graph, store: &ParamStore, h_cls: Var) -> Result<Var> {
        let logits = self.fc.forward(g, store, h_cls)?;
        g.softmax(logits, 1)
    }
}

/// `−[y log p + (1 − y) log(1 − p)]` with `p` clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce(g: &mut Graph, p_hateful: Var, y: u8) -> Var {
    let p = g.clamp(p_hateful, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let ll = if y == 1 {
        g.log(p)
    } else {
        let q = g.scale(p, -1.0);
        let q = g.add_scalar(q, 1.0);
        g.log(q)
    };
    g.scale(ll, -1.0)
}

/// One training or evaluation example: a laid-out sequence and its regions.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub layout: SequenceLayout,
    pub regions: Vec<RegionFeature>,
    pub label: u8,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: TrnConfig,
    pub embedder: Embedder,
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Detector {
    pub fn new(store: &mut ParamStore, cfg: &TrnConfig, vocab_size: usize, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let embedder = Embedder::new(store, vocab_size, cfg.limits.max_positions(), cfg.d_o, d, rng);
        let stack = |store: &mut ParamStore, prefix: &str, n: usize, rng: &mut RngState| -> Result<Vec<Block>> {
            (0..n)
                .map(|i| Block::new(store, &format!("{prefix}.layer{i}"), d, cfg.heads, rng))
                .collect()
        };
        let encoder = match cfg.variant {
            Variant::OneStream => Encoder::OneStream(stack(store, "trn", cfg.layers, rng)?),
            Variant::TwoStream => {
                let text = stack(store, "text", cfg.text_layers, rng)?;
                let visual = stack(store, "vis", cfg.visual_layers, rng)?;
                let co = (0..cfg.co_layers)
                    .map(|i| {
                        Ok((
                            Block::new(store, &format!("co.layer{i}.t2v"), d, cfg.heads, rng)?,
                            Block::new(store, &format!("co.layer{i}.v2t"), d, cfg.heads, rng)?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                Encoder::TwoStream { text, visual, co }
            }
        };
        let head = ClassifierHead::new(store, d, rng);
        Ok(Self {
            cfg: cfg.clone(),
            embedder,
            encoder,
            head,
        })
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, layout: &SequenceLayout, regions: &[RegionFeature]) -> Result<InputSequence> {
        self.embedder.embed(g, store, layout, regions)
    }

    /// Final `[CLS]` row (`1×d`).
    pub fn h_cls(&self, g: &mut Graph, store: &ParamStore, seq: &InputSequence) -> Result<Var> {
        match &self.encoder {
            Encoder::OneStream(blocks) => {
                let mask = AttnMask::Keys(seq.layout.mask());
                let mut h = seq.joint;
                for b in blocks {
                    h = b.forward(g, store, h, h, &mask)?;
                }
                g.row(h, seq.layout.cls_index())
            }
            Encoder::TwoStream { text, visual, co } => {
                let n_pad = seq.layout.n_pad();
                let mut t = match seq.pads {
                    Some(p) => g.concat(&[seq.text, p], 0)?,
                    None => seq.text,
                };
                let mut tmask = vec![true; seq.layout.n_text];
                tmask.extend(std::iter::repeat_n(false, n_pad));
                let tmask = AttnMask::Keys(tmask);
                for b in text {
                    t = b.forward(g, store, t, t, &tmask)?;
                }
                if let Some(mut v) = seq.visual {
                    let vmask = AttnMask::all(seq.layout.n_visual);
                    for b in visual {
                        v = b.forward(g, store, v, v, &vmask)?;
                    }
                    for (t2v, v2t) in co {
                        let nt = t2v.forward(g, store, t, v, &vmask)?;
                        let nv = v2t.forward(g, store, v, t, &tmask)?;
                        t = nt;
                        v = nv;
                    }
                }
                g.row(t, seq.layout.cls_index())
            }
        }
    }

    /// `1×2` class probabilities for one example.
    pub fn probs(&self, g: &mut Graph, store: &ParamStore, layout: &SequenceLayout, regions: &[RegionFeature]) -> Result<Var> {
        let seq = self.embed(g, store, layout, regions)?;
        let h = self.h_cls(g, store, &seq)?;
        self.head.probs(g, store, h)
    }

    /// Mean BCE over a batch, all on one graph.
    pub fn batch_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[&Example]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let p = self.probs(g, store, &ex.layout, &ex.regions)?;
            let ph = g.slice(p, 1, 1, 2)?;
            losses.push(bce(g, ph, ex.label));
        }
        let all = g.concat(&losses, 0)?;
        Ok(g.mean(all))
    }

    /// Hateful probability per example, evaluation mode.
    pub fn predict(&self, store: &ParamStore, examples: &[Example]) -> Result<Vec<f64>> {
        examples
            .iter()
            .map(|ex| {
                let mut g = Graph::new();
                let p = self.probs(&mut g, store, &ex.layout, &ex.regions)?;
                Ok(g.value(p).data()[1])
            })
            .collect()
    }

    /// [`predict`](Self::predict) split across `threads` scoped workers.
    pub fn predict_parallel(&self, store: &ParamStore, examples: &[Example], threads: usize) -> Result<Vec<f64>> {
        let threads = threads.max(1);
        if threads == 1 || examples.len() < 2 * threads {
            return self.predict(store, examples);
        }
        let chunk = examples.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = examples
                .chunks(chunk)
                .map(|c| s.spawn(move || self.predict(store, c)))
                .collect();
            let mut out = Vec::with_capacity(examples.len());
            for h in handles {
                out.extend(h.join().expect("prediction worker panicked")?);
            }
            Ok(out)
        })
    }
}

/// Probability pair from a raw logit pair, for callers outside a graph.
pub fn classify(logits: [f64; 2]) -> [f64; 2] {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 2], logits.to_vec()).expect("1x2"));
    let p = g.softmax(x, 1).expect("softmax");
    let d = g.value(p).data();
    [d[0], d[1]]
}
