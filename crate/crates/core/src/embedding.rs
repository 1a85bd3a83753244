//! Joint input sequence: text embeddings (word + segment + position, layer
//! normalized), region embeddings (feature and box projections, layer
//! normalized) and the slot layout that orders them.

use serde::{Deserialize, Serialize};

use crate::data::{MemeSample, RegionFeature};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, RngState, Tensor, Var};
use crate::text::vocab::{CLS, PAD, SEP};
use crate::text::{wordpiece_tokenize, TokenizedText, Vocab};

pub const SEG_OCR: usize = 0;
pub const SEG_CAPTION: usize = 1;
pub const SEG_LABELS: usize = 2;
pub const N_SEGMENTS: usize = 3;
pub const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Special,
    Ocr,
    Caption,
    ObjLabel,
    Visual,
    Pad,
}

/// Which inputs reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputFlags {
    pub use_ocr: bool,
    pub use_regions: bool,
    pub use_caption: bool,
    pub use_object_labels: bool,
    pub use_augmentation: bool,
}

impl Default for InputFlags {
    fn default() -> Self {
        Self {
            use_ocr: true,
            use_regions: true,
            use_caption: true,
            use_object_labels: true,
            use_augmentation: false,
        }
    }
}

/// Per-segment and total length caps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutLimits {
    pub max_ocr: usize,
    pub max_caption: usize,
    pub max_labels: usize,
    pub max_regions: usize,
    pub max_total: usize,
}

impl Default for LayoutLimits {
    fn default() -> Self {
        Self {
            max_ocr: 32,
            max_caption: 24,
            max_labels: 16,
            max_regions: 10,
            max_total: 128,
        }
    }
}

impl LayoutLimits {
    /// Position-table rows needed: the longest segment plus its `[SEP]`.
    pub fn max_positions(&self) -> usize {
        self.max_ocr.max(self.max_caption).max(self.max_labels) + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub modality: Modality,
    /// Vocabulary id; `[PAD]` for visual slots.
    pub token: u32,
    pub segment: usize,
    pub position: usize,
    /// Region index for visual slots.
    pub region: Option<usize>,
}

/// Slot order: `[CLS]`, OCR, `[SEP]`, caption, `[SEP]`, object labels, `[SEP]`,
/// visual slots, pads. Disabled caption or label segments are omitted entirely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub slots: Vec<Slot>,
    pub n_text: usize,
    pub n_visual: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn cls_index(&self) -> usize {
        0
    }

    pub fn n_pad(&self) -> usize {
        self.slots.len() - self.n_text - self.n_visual
    }

    /// True on real slots, false on pads.
    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.modality != Modality::Pad).collect()
    }

    pub fn count(&self, m: Modality) -> usize {
        self.slots.iter().filter(|s| s.modality == m).count()
    }

    /// Appends pad slots up to `len` (no-op if already that long).
    pub fn pad_to(&mut self, len: usize) {
        while self.slots.len() < len {
            self.slots.push(Slot {
                modality: Modality::Pad,
                token: PAD,
                segment: SEG_OCR,
                position: 0,
                region: None,
            });
        }
    }
}

fn special(token: u32, segment: usize, position: usize) -> Slot {
    Slot {
        modality: Modality::Special,
        token,
        segment,
        position,
        region: None,
    }
}

/// Lays out the joint sequence. When the total exceeds `limits.max_total`,
/// text is cut from the last segment backwards, keeping each segment's
/// leading tokens, and visual slots are dropped only once no text is left;
/// `[CLS]` and every `[SEP]` always survive.
pub fn assemble_sequence(
    ocr: &TokenizedText,
    caption: Option<&TokenizedText>,
    labels: Option<&TokenizedText>,
    n_regions: usize,
    flags: InputFlags,
    limits: &LayoutLimits,
) -> Result<SequenceLayout> {
    let empty = TokenizedText::empty();
    let take = |t: &TokenizedText, cap: usize| t.ids[..t.ids.len().min(cap)].to_vec();
    let mut segments: Vec<(usize, Modality, Vec<u32>)> = vec![(
        SEG_OCR,
        Modality::Ocr,
        if flags.use_ocr { take(ocr, limits.max_ocr) } else { Vec::new() },
    )];
    if flags.use_caption {
        segments.push((SEG_CAPTION, Modality::Caption, take(caption.unwrap_or(&empty), limits.max_caption)));
    }
    if flags.use_object_labels {
        segments.push((SEG_LABELS, Modality::ObjLabel, take(labels.unwrap_or(&empty), limits.max_labels)));
    }
    let mut n_visual = if flags.use_regions { n_regions.min(limits.max_regions) } else { 0 };

    let fixed = 1 + segments.len();
    if fixed > limits.max_total {
        return Err(Error::input(format!(
            "max_total={} cannot hold [CLS] and {} [SEP] slots",
            limits.max_total,
            segments.len()
        )));
    }
    let mut excess = (fixed + n_visual + segments.iter().map(|s| s.2.len()).sum::<usize>()).saturating_sub(limits.max_total);
    for seg in segments.iter_mut().rev() {
        let cut = excess.min(seg.2.len());
        seg.2.truncate(seg.2.len() - cut);
        excess -= cut;
    }
    n_visual -= excess.min(n_visual);

    let mut slots = vec![special(CLS, SEG_OCR, 0)];
    for (segment, modality, ids) in &segments {
        for (p, &token) in ids.iter().enumerate() {
            slots.push(Slot {
                modality: *modality,
                token,
                segment: *segment,
                position: p,
                region: None,
            });
        }
        slots.push(special(SEP, *segment, ids.len()));
    }
    let n_text = slots.len();
    for r in 0..n_visual {
        slots.push(Slot {
            modality: Modality::Visual,
            token: PAD,
            segment: SEG_OCR,
            position: 0,
            region: Some(r),
        });
    }
    Ok(SequenceLayout { slots, n_text, n_visual })
}

/// Object-label words of the regions, space separated.
pub fn label_text(regions: &[RegionFeature]) -> String {
    regions.iter().map(|r| r.label.as_str()).collect::<Vec<_>>().join(" ")
}

/// Tokenizes a meme's OCR text, caption and region labels and lays them out.
pub fn layout_meme(meme: &MemeSample, vocab: &Vocab, flags: InputFlags, limits: &LayoutLimits) -> Result<SequenceLayout> {
    let ocr = wordpiece_tokenize(&meme.text, vocab, limits.max_ocr);
    let caption = meme
        .caption
        .as_deref()
        .map(|c| wordpiece_tokenize(c, vocab, limits.max_caption));
    let regions = &meme.regions[..meme.regions.len().min(limits.max_regions)];
    let labels = wordpiece_tokenize(&label_text(regions), vocab, limits.max_labels);
    assemble_sequence(&ocr, caption.as_ref(), Some(&labels), meme.regions.len(), flags, limits)
}

/// Word, segment and position tables with a shared layer norm.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    pub word: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl TextEmbedder {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab_size: usize, max_positions: usize, d: usize, rng: &mut RngState) -> Self {
        Self {
            word: store.normal(format!("{prefix}.word"), &[vocab_size, d], 1.0, rng),
            segment: store.normal(format!("{prefix}.segment"), &[N_SEGMENTS, d], 1.0, rng),
            position: store.normal(format!("{prefix}.position"), &[max_positions, d], 1.0, rng),
            ln_gain: store.ones(format!("{prefix}.ln.gain"), &[d]),
            ln_bias: store.zeros(format!("{prefix}.ln.bias"), &[d]),
        }
    }

    /// `LN(word[id] + segment[s] + position[p])` per token.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[u32], segments: &[usize], positions: &[usize]) -> Result<Var> {
        if ids.len() != segments.len() || ids.len() != positions.len() {
            return Err(Error::dim("embed_text", &[ids.len()], &[segments.len(), positions.len()]));
        }
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let w = g.param(store, self.word);
        let s = g.param(store, self.segment);
        let p = g.param(store, self.position);
        let w = g.embedding(w, &ids)?;
        let s = g.embedding(s, segments)?;
        let p = g.embedding(p, positions)?;
        let x = g.add(w, s)?;
        let x = g.add(x, p)?;
        let gain = g.param(store, self.ln_gain);
        let bias = g.param(store, self.ln_bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Region feature and box projections with a layer norm.
#[derive(Clone, Debug)]
pub struct VisualEmbedder {
    pub d_o: usize,
    pub feat_w: ParamId,
    pub feat_b: ParamId,
    pub box_w: ParamId,
    pub box_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl VisualEmbedder {
    pub fn new(store: &mut ParamStore, prefix: &str, d_o: usize, d: usize, rng: &mut RngState) -> Self {
        Self {
            d_o,
            feat_w: store.normal(format!("{prefix}.feat.w"), &[d_o, d], (d_o as f64).powf(-0.5), rng),
            feat_b: store.zeros(format!("{prefix}.feat.b"), &[d]),
            box_w: store.normal(format!("{prefix}.box.w"), &[4, d], 0.5, rng),
            box_b: store.zeros(format!("{prefix}.box.b"), &[d]),
            ln_gain: store.ones(format!("{prefix}.ln.gain"), &[d]),
            ln_bias: store.zeros(format!("{prefix}.ln.bias"), &[d]),
        }
    }

    /// `LN(feat·W_f + b_f + box·W_p + b_p)` per region, in input order.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, regions: &[RegionFeature]) -> Result<Var> {
        let n = regions.len();
        let mut feats = Vec::with_capacity(n * self.d_o);
        let mut boxes = Vec::with_capacity(n * 4);
        for r in regions {
            r.validate(Some(self.d_o))?;
            feats.extend_from_slice(&r.feat);
            boxes.extend_from_slice(&r.bbox);
        }
        let f = g.input(Tensor::new(vec![n, self.d_o], feats)?);
        let b = g.input(Tensor::new(vec![n, 4], boxes)?);
        let fw = g.param(store, self.feat_w);
        let fb = g.param(store, self.feat_b);
        let bw = g.param(store, self.box_w);
        let bb = g.param(store, self.box_b);
        let f = g.matmul(f, fw)?;
        let f = g.add_row(f, fb)?;
        let b = g.matmul(b, bw)?;
        let b = g.add_row(b, bb)?;
        let x = g.add(f, b)?;
        let gain = g.param(store, self.ln_gain);
        let bias = g.param(store, self.ln_bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Embedded rows of a laid-out sequence.
#[derive(Clone, Debug)]
pub struct InputSequence {
    pub layout: SequenceLayout,
    /// Text slots (`[CLS]` first).
    pub text: Var,
    pub visual: Option<Var>,
    pub pads: Option<Var>,
    /// All slots in layout order.
    pub joint: Var,
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub text: TextEmbedder,
    pub visual: VisualEmbedder,
}

impl Embedder {
    pub fn new(store: &mut ParamStore, vocab_size: usize, max_positions: usize, d_o: usize, d: usize, rng: &mut RngState) -> Self {
        Self {
            text: TextEmbedder::new(store, "emb", vocab_size, max_positions, d, rng),
            visual: VisualEmbedder::new(store, "vis", d_o, d, rng),
        }
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, layout: &SequenceLayout, regions: &[RegionFeature]) -> Result<InputSequence> {
        let text_slots = &layout.slots[..layout.n_text];
        let ids: Vec<u32> = text_slots.iter().map(|s| s.token).collect();
        let segs: Vec<usize> = text_slots.iter().map(|s| s.segment).collect();
        let pos: Vec<usize> = text_slots.iter().map(|s| s.position).collect();
        let text = self.text.embed(g, store, &ids, &segs, &pos)?;

        let visual = if layout.n_visual > 0 {
            if regions.len() < layout.n_visual {
                return Err(Error::dim("embed regions", &[regions.len()], &[layout.n_visual]));
            }
            Some(self.visual.embed(g, store, &regions[..layout.n_visual])?)
        } else {
            None
        };
        let n_pad = layout.n_pad();
        let pads = if n_pad > 0 {
            Some(self.text.embed(g, store, &vec![PAD; n_pad], &vec![SEG_OCR; n_pad], &vec![0; n_pad])?)
        } else {
            None
        };
        let parts: Vec<Var> = std::iter::once(text).chain(visual).chain(pads).collect();
        let joint = if parts.len() == 1 { text } else { g.concat(&parts, 0)? };
        Ok(InputSequence {
            layout: layout.clone(),
            text,
            visual,
            pads,
            joint,
        })
    }
}
