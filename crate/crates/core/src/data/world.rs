//! Synthetic meme world with a planted cross-modal labelling rule.
//!
//! Each meme carries a text indicator (a trigger word in its OCR text) and a
//! visual indicator (a trigger concept among its regions). The label is the
//! rule applied to the pair, optionally flipped by label noise. Labels are
//! drawn first to hit exact split counts, then indicators are drawn among
//! the pairs consistent with the label, which keeps every single indicator
//! uninformative under XOR.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::splits::SplitPlan;
use super::{CaptionSample, MemeSample, Provenance, RegionFeature};
use crate::error::{Error, Result};
use crate::numerics::{stable_hash, streams, RngState};
use crate::text::normalize_words;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    And,
    Xor,
}

impl Rule {
    pub fn eval(self, text: bool, visual: bool) -> bool {
        match self {
            Rule::And => text && visual,
            Rule::Xor => text != visual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_samples: usize,
    /// Overrides `n_samples` and the fractions when set.
    pub split_sizes: Option<SplitSizes>,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub train_hateful_fraction: f64,
    pub rule: Rule,
    pub noise_rate: f64,
    pub trigger_words: Vec<String>,
    pub benign_words: Vec<String>,
    /// Benign word → interchangeable benign alternatives.
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub concepts: Vec<String>,
    pub trigger_concepts: Vec<String>,
    /// Shown instead of a trigger concept when there is none (and, in caption-only worlds, in its place).
    pub decoy_concept: String,
    pub regions_per_image: usize,
    pub d_o: usize,
    pub sigma_v: f64,
    /// Trigger concepts are rendered with the decoy's features and label, so
    /// only the reference captions reveal them.
    pub caption_only: bool,
    /// Fill each meme's caption with its reference caption.
    pub oracle_captions: bool,
    pub n_references: usize,
    /// Caption templates; `{}` is replaced by the object list. The first is canonical.
    pub caption_templates: Vec<String>,
    pub n_caption_images: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let mut synonyms = BTreeMap::new();
        for (w, alts) in [
            ("happy", &["glad", "cheerful"][..]),
            ("today", &["tonight", "now"]),
            ("friend", &["buddy", "pal"]),
            ("best", &["greatest", "finest"]),
            ("love", &["adore", "enjoy"]),
            ("see", &["spot", "notice"]),
            ("morning", &["dawn", "sunrise"]),
            ("party", &["gathering", "celebration"]),
            ("new", &["fresh", "novel"]),
            ("just", &["only", "simply"]),
        ] {
            synonyms.insert(w.to_string(), strings(alts));
        }
        Self {
            seed: 0,
            n_samples: 10_000,
            split_sizes: None,
            dev_fraction: 0.05,
            test_fraction: 0.10,
            train_hateful_fraction: 0.36,
            rule: Rule::Xor,
            noise_rate: 0.0,
            trigger_words: strings(&["grob", "snark", "vex", "blight"]),
            benign_words: strings(&[
                "look", "at", "this", "my", "friend", "today", "when", "you", "finally", "see", "the", "new", "game",
                "best", "day", "ever", "happy", "morning", "coffee", "weekend", "party", "feels", "like", "again",
                "just", "got", "home", "love", "our", "team",
            ]),
            synonyms,
            concepts: strings(&["dog", "cat", "car", "tree", "house", "bird", "boat", "chair", "cup", "lamp"]),
            trigger_concepts: strings(&["snake", "skull"]),
            decoy_concept: "ball".into(),
            regions_per_image: 3,
            d_o: 32,
            sigma_v: 0.3,
            caption_only: false,
            oracle_captions: false,
            n_references: 5,
            caption_templates: strings(&[
                "{}",
                "a photo of {}",
                "there is {} in the picture",
                "an image showing {}",
                "{} together",
            ]),
            n_caption_images: 200,
        }
    }
}

impl WorldConfig {
    pub fn plan(&self) -> Result<SplitPlan> {
        match self.split_sizes {
            Some(s) => SplitPlan::from_sizes(s.train, s.dev, s.test, self.train_hateful_fraction, s.train + s.dev + s.test),
            None => SplitPlan::from_fractions(
                self.n_samples,
                self.dev_fraction,
                self.test_fraction,
                self.train_hateful_fraction,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let triggers: BTreeSet<&str> = self.trigger_words.iter().map(String::as_str).collect();
        let mut benign: BTreeSet<&str> = self.benign_words.iter().map(String::as_str).collect();
        for (k, alts) in &self.synonyms {
            benign.insert(k);
            benign.extend(alts.iter().map(String::as_str));
        }
        if let Some(w) = triggers.intersection(&benign).next() {
            return Err(Error::input(format!("'{w}' is both a trigger and a benign word")));
        }
        if self.benign_words.is_empty() {
            return Err(Error::input("benign lexicon is empty"));
        }
        let mut all: Vec<&String> = self.concepts.iter().chain(&self.trigger_concepts).collect();
        all.push(&self.decoy_concept);
        if all.iter().collect::<BTreeSet<_>>().len() != all.len() {
            return Err(Error::input("concept, trigger-concept and decoy names must be distinct"));
        }
        if self.regions_per_image == 0 || self.regions_per_image > self.concepts.len() + 1 {
            return Err(Error::input(format!(
                "regions_per_image={} needs 1..={} scene concepts",
                self.regions_per_image,
                self.concepts.len() + 1
            )));
        }
        if self.d_o == 0 || self.sigma_v.is_nan() || self.sigma_v <= 0.0 {
            return Err(Error::input("d_o and sigma_v must be positive"));
        }
        if !(0.0..=0.5).contains(&self.noise_rate) {
            return Err(Error::input(format!("noise rate {} outside [0, 0.5]", self.noise_rate)));
        }
        if self.n_references == 0 || self.n_references > self.caption_templates.len() {
            return Err(Error::input(format!(
                "n_references={} needs between 1 and {} templates",
                self.n_references,
                self.caption_templates.len()
            )));
        }
        if self.caption_templates.iter().any(|t| !t.contains("{}")) {
            return Err(Error::input("every caption template needs a {} placeholder"));
        }
        self.plan()?;
        Ok(())
    }

    /// Whether the OCR text contains a trigger word, after normalization.
    pub fn text_indicator(&self, text: &str) -> bool {
        normalize_words(text).iter().any(|w| self.trigger_words.contains(w))
    }

    pub fn visual_indicator(&self, concepts: &[String]) -> bool {
        concepts.iter().any(|c| self.trigger_concepts.contains(c))
    }

    /// Synonym table and protected words for the paraphraser.
    pub fn lexicon(&self) -> Lexicon {
        Lexicon {
            synonyms: self.synonyms.clone(),
            protected: self.trigger_words.iter().cloned().collect(),
        }
    }

    fn can_emit(&self, target: bool) -> bool {
        let t_opts: &[bool] = if self.trigger_words.is_empty() { &[false] } else { &[false, true] };
        let v_opts: &[bool] = if self.trigger_concepts.is_empty() { &[false] } else { &[false, true] };
        t_opts.iter().any(|&t| v_opts.iter().any(|&v| self.rule.eval(t, v) == target))
    }

    fn indicator_pairs(&self, target: bool) -> Vec<(bool, bool)> {
        let mut out = Vec::new();
        for t in [false, true] {
            for v in [false, true] {
                if (t && self.trigger_words.is_empty()) || (v && self.trigger_concepts.is_empty()) {
                    continue;
                }
                if self.rule.eval(t, v) == target {
                    out.push((t, v));
                }
            }
        }
        out
    }
}

/// Paraphrase lexicon exported with a generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub protected: BTreeSet<String>,
}

/// A generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub train: Vec<MemeSample>,
    pub dev: Vec<MemeSample>,
    pub test: Vec<MemeSample>,
    pub captions: Vec<CaptionSample>,
    pub provenance: Vec<Provenance>,
    /// Set when the rule cannot produce positives, so every label is 0.
    pub balance_waived: bool,
}

impl World {
    pub fn memes(&self) -> impl Iterator<Item = &MemeSample> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Every string a tokenizer for this world must cover.
    pub fn vocab_corpus(&self, cfg: &WorldConfig) -> Vec<String> {
        let mut out: Vec<String> = self.memes().map(|m| m.text.clone()).collect();
        for c in &self.captions {
            out.extend(c.references.iter().cloned());
        }
        for p in &self.provenance {
            out.push(p.reference_caption.clone());
        }
        for (k, alts) in &cfg.synonyms {
            out.push(k.clone());
            out.extend(alts.iter().cloned());
        }
        out.extend(cfg.trigger_words.iter().cloned());
        out.extend(cfg.concepts.iter().cloned());
        out.extend(cfg.trigger_concepts.iter().cloned());
        out.push(cfg.decoy_concept.clone());
        out
    }
}

/// Concept prototypes, pairwise farther apart than `4 σ_v`.
pub fn prototypes(cfg: &WorldConfig) -> Result<BTreeMap<String, Vec<f64>>> {
    let names: Vec<&String> = cfg
        .concepts
        .iter()
        .chain(&cfg.trigger_concepts)
        .chain(std::iter::once(&cfg.decoy_concept))
        .collect();
    let mut rng = RngState::with_stream(cfg.seed, streams::WORLD);
    for _ in 0..100 {
        let protos: Vec<Vec<f64>> = names.iter().map(|_| (0..cfg.d_o).map(|_| rng.normal()).collect()).collect();
        let separated = protos.iter().enumerate().all(|(i, a)| {
            protos[i + 1..].iter().all(|b| {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                d2.sqrt() > 4.0 * cfg.sigma_v
            })
        });
        if separated {
            return Ok(names.into_iter().cloned().zip(protos).collect());
        }
    }
    Err(Error::input(format!(
        "cannot place {} prototypes in {} dims more than 4*sigma_v={} apart",
        names.len(),
        cfg.d_o,
        4.0 * cfg.sigma_v
    )))
}

fn object_list(concepts: &[String]) -> String {
    concepts.iter().map(|c| format!("a {c}")).collect::<Vec<_>>().join(" and ")
}

fn references(cfg: &WorldConfig, concepts: &[String]) -> Vec<String> {
    let objs = object_list(concepts);
    cfg.caption_templates[..cfg.n_references]
        .iter()
        .map(|t| t.replacen("{}", &objs, 1))
        .collect()
}

struct Scene {
    concepts: Vec<String>,
    regions: Vec<RegionFeature>,
}

/// Scene with one slot showing either a trigger concept or the decoy; the
/// others are distinct benign concepts. Slots are laid out left to right.
fn scene(cfg: &WorldConfig, protos: &BTreeMap<String, Vec<f64>>, visual: bool, alias: bool, rng: &mut RngState) -> Scene {
    let mut pool = cfg.concepts.clone();
    rng.shuffle(&mut pool);
    let mut concepts: Vec<String> = pool.into_iter().take(cfg.regions_per_image - 1).collect();
    let special = if visual {
        rng.choose(&cfg.trigger_concepts).clone()
    } else {
        cfg.decoy_concept.clone()
    };
    let at = rng.below(concepts.len() + 1);
    concepts.insert(at, special);

    let n = concepts.len() as f64;
    let regions = concepts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let shown = if alias && cfg.trigger_concepts.contains(c) { &cfg.decoy_concept } else { c };
            let feat = protos[shown].iter().map(|m| m + cfg.sigma_v * rng.normal()).collect();
            let x1 = (i as f64 + 0.3 * rng.uniform()) / n;
            let x2 = (i as f64 + 1.0 - 0.3 * rng.uniform()) / n;
            let y1 = 0.4 * rng.uniform();
            let y2 = 0.6 + 0.4 * rng.uniform();
            RegionFeature {
                feat,
                bbox: [x1, y1, x2, y2],
                label: shown.clone(),
                score: 0.5 + 0.5 * rng.uniform(),
            }
        })
        .collect();
    Scene { concepts, regions }
}

fn ocr_text(cfg: &WorldConfig, trigger: bool, rng: &mut RngState) -> String {
    let mut words: Vec<String> = Vec::new();
    let clauses = 1 + rng.below(2);
    for c in 0..clauses {
        if c > 0 {
            words.push(if rng.bernoulli(0.5) { "and".into() } else { ",".into() });
        }
        for _ in 0..2 + rng.below(3) {
            words.push(rng.choose(&cfg.benign_words).clone());
        }
    }
    if trigger {
        let at = rng.below(words.len() + 1);
        words.insert(at, rng.choose(&cfg.trigger_words).clone());
    }
    words.join(" ")
}

/// Generates train/dev/test memes, a caption corpus and provenance records.
pub fn gen_synthetic(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let protos = prototypes(cfg)?;
    let balance_waived = !cfg.can_emit(true);

    let mut split_rng = RngState::with_stream(cfg.seed, streams::SPLIT);
    let mut labels_for = |n: usize, pos: usize| -> Vec<u8> {
        let pos = if balance_waived { 0 } else { pos };
        let mut l: Vec<u8> = (0..n).map(|i| u8::from(i < pos)).collect();
        split_rng.shuffle(&mut l);
        l
    };
    let splits = [
        ("train", labels_for(plan.train, plan.train_pos)),
        ("dev", labels_for(plan.dev, plan.dev / 2)),
        ("test", labels_for(plan.test, plan.test / 2)),
    ];

    let mut out: [Vec<MemeSample>; 3] = Default::default();
    let mut provenance = Vec::with_capacity(plan.total());
    for (k, (name, labels)) in splits.iter().enumerate() {
        for (i, &label) in labels.iter().enumerate() {
            let id = format!("{name}-{i:05}");
            let mut rng = RngState::with_stream(cfg.seed ^ stable_hash(&id), streams::WORLD);
            let mut target = label == 1;
            let flipped = cfg.noise_rate > 0.0 && rng.bernoulli(cfg.noise_rate) && cfg.can_emit(!target);
            if flipped {
                target = !target;
            }
            let pairs = cfg.indicator_pairs(target);
            let (t, v) = *rng.choose(&pairs);
            let text = ocr_text(cfg, t, &mut rng);
            let sc = scene(cfg, &protos, v, cfg.caption_only, &mut rng);
            let reference_caption = object_list(&sc.concepts);
            out[k].push(MemeSample {
                id: id.clone(),
                text,
                label,
                regions: sc.regions,
                caption: cfg.oracle_captions.then(|| reference_caption.clone()),
            });
            provenance.push(Provenance {
                id,
                text_indicator: t,
                visual_indicator: v,
                noise_flipped: flipped,
                concepts: sc.concepts,
                reference_caption,
            });
        }
    }

    let captions = (0..cfg.n_caption_images)
        .map(|i| {
            let id = format!("img-{i:05}");
            let mut rng = RngState::with_stream(cfg.seed ^ stable_hash(&id), streams::WORLD);
            let v = !cfg.trigger_concepts.is_empty() && rng.bernoulli(0.5);
            let sc = scene(cfg, &protos, v, false, &mut rng);
            CaptionSample {
                id,
                references: references(cfg, &sc.concepts),
                regions: sc.regions,
            }
        })
        .collect();

    let [train, dev, test] = out;
    Ok(World {
        train,
        dev,
        test,
        captions,
        provenance,
        balance_waived,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rule: Rule) -> WorldConfig {
        WorldConfig {
            n_samples: 400,
            rule,
            n_caption_images: 10,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn rule_is_recoverable_from_text_and_provenance() {
        for rule in [Rule::Xor, Rule::And] {
            let cfg = small(rule);
            let w = gen_synthetic(&cfg).unwrap();
            for (m, p) in w.memes().zip(&w.provenance) {
                assert_eq!(m.id, p.id);
                assert!(!p.noise_flipped);
                assert_eq!(cfg.text_indicator(&m.text), p.text_indicator);
                assert_eq!(cfg.visual_indicator(&p.concepts), p.visual_indicator);
                let shown: Vec<String> = m.regions.iter().map(|r| r.label.clone()).collect();
                assert_eq!(shown, p.concepts);
                assert_eq!(u8::from(rule.eval(p.text_indicator, p.visual_indicator)), m.label);
                for r in &m.regions {
                    r.validate(Some(cfg.d_o)).unwrap();
                }
            }
        }
    }

    #[test]
    fn vacuous_and_rule_gives_all_negative() {
        let cfg = WorldConfig {
            rule: Rule::And,
            trigger_words: vec![],
            ..small(Rule::And)
        };
        let w = gen_synthetic(&cfg).unwrap();
        assert!(w.balance_waived);
        assert!(w.memes().all(|m| m.label == 0));
    }

    #[test]
    fn noise_flips_are_recorded() {
        let cfg = WorldConfig {
            noise_rate: 0.2,
            ..small(Rule::Xor)
        };
        let w = gen_synthetic(&cfg).unwrap();
        let mut flips = 0;
        for (m, p) in w.memes().zip(&w.provenance) {
            let rule = u8::from(cfg.rule.eval(p.text_indicator, p.visual_indicator));
            assert_eq!(rule != m.label, p.noise_flipped);
            flips += usize::from(p.noise_flipped);
        }
        assert!(flips > 40 && flips < 130, "{flips}");
    }

    #[test]
    fn caption_only_world_hides_triggers_from_regions() {
        let cfg = WorldConfig {
            caption_only: true,
            oracle_captions: true,
            ..small(Rule::Xor)
        };
        let w = gen_synthetic(&cfg).unwrap();
        let mut hidden = 0;
        for (m, p) in w.memes().zip(&w.provenance) {
            assert!(m.regions.iter().all(|r| !cfg.trigger_concepts.contains(&r.label)));
            assert_eq!(m.caption.as_deref(), Some(p.reference_caption.as_str()));
            if p.visual_indicator {
                hidden += 1;
                assert!(cfg.trigger_concepts.iter().any(|c| p.reference_caption.contains(c.as_str())));
            }
        }
        assert!(hidden > 0);
    }

    #[test]
    fn generation_is_reproducible_and_seed_sensitive() {
        let cfg = small(Rule::Xor);
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
        let other = gen_synthetic(&WorldConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other.train[0], gen_synthetic(&small(Rule::Xor)).unwrap().train[0]);
    }

    #[test]
    fn caption_corpus_has_requested_references() {
        let w = gen_synthetic(&small(Rule::Xor)).unwrap();
        assert_eq!(w.captions.len(), 10);
        for c in &w.captions {
            assert_eq!(c.references.len(), 5);
            assert!(c.references.iter().all(|r| !r.is_empty()));
            assert_eq!(c.regions.len(), 3);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let overlap = WorldConfig {
            trigger_words: vec!["happy".into()],
            ..WorldConfig::default()
        };
        assert!(overlap.validate().is_err());
        let tiny = WorldConfig {
            n_samples: 10,
            ..WorldConfig::default()
        };
        assert!(gen_synthetic(&tiny).is_err());
    }

    #[test]
    fn prototypes_are_separated() {
        let cfg = WorldConfig::default();
        let p = prototypes(&cfg).unwrap();
        assert_eq!(p.len(), cfg.concepts.len() + cfg.trigger_concepts.len() + 1);
        let crowded = WorldConfig {
            d_o: 1,
            sigma_v: 5.0,
            ..cfg
        };
        assert!(prototypes(&crowded).is_err());
    }
}
