//! Label-preserving text diversification.
//!
//! Stands in for round-trip translation: a seeded rule-based paraphraser that
//! swaps synonyms and reorders clauses while leaving protected words alone.
//! Any other paraphraser can replace it behind [`Paraphraser`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::normalize_words;
use crate::data::MemeSample;
use crate::error::{Error, Result};
use crate::numerics::{stable_hash, streams, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParaphraseMode {
    Synonym,
    Reorder,
    Both,
}

/// Diversity levels, mirroring decoder beam widths.
pub const DIVERSITY_LEVELS: [usize; 3] = [2, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseConfig {
    pub mode: ParaphraseMode,
    /// Number of variants requested; one of [`DIVERSITY_LEVELS`].
    pub k: usize,
    pub seed: u64,
    /// word → interchangeable alternatives
    #[serde(default)]
    pub lexicon: BTreeMap<String, Vec<String>>,
    /// Words that are never substituted nor introduced.
    #[serde(default)]
    pub protected: BTreeSet<String>,
}

impl ParaphraseConfig {
    pub fn validate(&self) -> Result<()> {
        if !DIVERSITY_LEVELS.contains(&self.k) {
            return Err(Error::input(format!(
                "paraphrase diversity k={} must be one of {DIVERSITY_LEVELS:?}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Augmentation output. `warning` is set when fewer than `k` distinct variants
/// could be produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub samples: Vec<MemeSample>,
    pub warning: bool,
}

/// Produces label-preserving rewrites of a meme's OCR text.
pub trait Paraphraser {
    fn augment(&self, sample: &MemeSample) -> Augmented;
}

impl Paraphraser for ParaphraseConfig {
    fn augment(&self, sample: &MemeSample) -> Augmented {
        paraphrase_augment(sample, self)
    }
}

const CLAUSE_BREAKS: [&str; 3] = [",", "and", "but"];

fn substitute(words: &mut [String], cfg: &ParaphraseConfig, rng: &mut RngState) {
    for w in words.iter_mut() {
        if cfg.protected.contains(w.as_str()) {
            continue;
        }
        let Some(alts) = cfg.lexicon.get(w.as_str()) else { continue };
        let alts: Vec<&String> = alts
            .iter()
            .filter(|a| !cfg.protected.contains(a.as_str()) && *a != w)
            .collect();
        if !alts.is_empty() && rng.bernoulli(0.5) {
            *w = alts[rng.below(alts.len())].clone();
        }
    }
}

/// Splits at clause breaks, shuffles the clauses and rejoins with the original breaks.
fn reorder(words: &[String], rng: &mut RngState) -> Vec<String> {
    let mut clauses: Vec<Vec<String>> = vec![Vec::new()];
    let mut breaks = Vec::new();
    for w in words {
        if CLAUSE_BREAKS.contains(&w.as_str()) {
            breaks.push(w.clone());
            clauses.push(Vec::new());
        } else {
            clauses.last_mut().expect("nonempty").push(w.clone());
        }
    }
    if clauses.len() < 2 {
        return words.to_vec();
    }
    rng.shuffle(&mut clauses);
    let mut out = Vec::with_capacity(words.len());
    for (i, c) in clauses.into_iter().enumerate() {
        if i > 0 {
            out.push(breaks[i - 1].clone());
        }
        out.extend(c);
    }
    out
}

/// Up to `k` distinct rewrites of the OCR text. Label, regions and caption are
/// copied unchanged; variant ids extend the source id with `~bt<n>`.
pub fn paraphrase_augment(sample: &MemeSample, cfg: &ParaphraseConfig) -> Augmented {
    let words = normalize_words(&sample.text);
    let substitutes = matches!(cfg.mode, ParaphraseMode::Synonym | ParaphraseMode::Both) && !cfg.lexicon.is_empty();
    let reorders = matches!(cfg.mode, ParaphraseMode::Reorder | ParaphraseMode::Both);
    if words.is_empty() || !(substitutes || reorders) {
        return Augmented {
            samples: vec![sample.clone()],
            warning: true,
        };
    }

    let original = words.join(" ");
    let mut rng = RngState::with_stream(cfg.seed ^ stable_hash(&sample.id), streams::PARAPHRASE);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..cfg.k * 20 {
        if out.len() == cfg.k {
            break;
        }
        let mut w = words.clone();
        if reorders {
            w = reorder(&w, &mut rng);
        }
        if substitutes {
            substitute(&mut w, cfg, &mut rng);
        }
        let text = w.join(" ");
        if text != original && seen.insert(text.clone()) {
            out.push(MemeSample {
                id: format!("{}~bt{}", sample.id, out.len() + 1),
                text,
                ..sample.clone()
            });
        }
    }
    if out.is_empty() {
        return Augmented {
            samples: vec![sample.clone()],
            warning: true,
        };
    }
    Augmented {
        warning: out.len() < cfg.k,
        samples: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meme(text: &str) -> MemeSample {
        MemeSample {
            id: "m1".into(),
            text: text.into(),
            label: 1,
            regions: vec![],
            caption: Some("a dog".into()),
        }
    }

    fn lexicon() -> BTreeMap<String, Vec<String>> {
        let mut l = BTreeMap::new();
        l.insert("happy".to_string(), vec!["glad".to_string(), "cheerful".to_string(), "joyful".to_string()]);
        l.insert("dog".to_string(), vec!["pup".to_string(), "hound".to_string()]);
        l.insert("today".to_string(), vec!["tonight".to_string(), "now".to_string()]);
        l.insert("grob".to_string(), vec!["nice".to_string()]);
        l
    }

    fn cfg(mode: ParaphraseMode, k: usize) -> ParaphraseConfig {
        ParaphraseConfig {
            mode,
            k,
            seed: 9,
            lexicon: lexicon(),
            protected: ["grob".to_string(), "blight".to_string()].into_iter().collect(),
        }
    }

    #[test]
    fn identity_mode_returns_input() {
        let c = ParaphraseConfig {
            lexicon: BTreeMap::new(),
            ..cfg(ParaphraseMode::Synonym, 2)
        };
        let m = meme("happy dog today");
        let out = paraphrase_augment(&m, &c);
        assert_eq!(out.samples, vec![m]);
    }

    #[test]
    fn protected_single_word_keeps_label() {
        let m = meme("grob");
        let out = paraphrase_augment(&m, &cfg(ParaphraseMode::Both, 2));
        assert!(out.samples.len() <= 2);
        assert!(out.warning);
        for s in &out.samples {
            assert_eq!(s.label, 1);
            assert_eq!(s.text.trim(), "grob");
        }
    }

    #[test]
    fn distinct_variants_preserve_everything_but_text() {
        let m = meme("happy dog today, grob and happy");
        for k in DIVERSITY_LEVELS {
            let out = paraphrase_augment(&m, &cfg(ParaphraseMode::Both, k));
            assert_eq!(out.samples.len(), k, "k={k}");
            assert!(!out.warning);
            let texts: BTreeSet<_> = out.samples.iter().map(|s| s.text.clone()).collect();
            assert_eq!(texts.len(), k);
            for s in &out.samples {
                assert_eq!(s.label, m.label);
                assert_eq!(s.regions, m.regions);
                assert_eq!(s.caption, m.caption);
                assert!(s.id.starts_with("m1~bt"));
                assert!(s.text.split(' ').any(|w| w == "grob"));
                assert!(!s.text.contains("nice"));
            }
        }
    }

    #[test]
    fn empty_text_is_returned_with_warning() {
        let m = meme("   ");
        let out = paraphrase_augment(&m, &cfg(ParaphraseMode::Both, 5));
        assert_eq!(out.samples, vec![m]);
        assert!(out.warning);
    }

    #[test]
    fn deterministic_per_seed() {
        let m = meme("happy dog today");
        let c = cfg(ParaphraseMode::Synonym, 5);
        assert_eq!(paraphrase_augment(&m, &c), paraphrase_augment(&m, &c));
    }

    #[test]
    fn diversity_level_is_validated() {
        assert!(cfg(ParaphraseMode::Both, 3).validate().is_err());
        assert!(cfg(ParaphraseMode::Both, 10).validate().is_ok());
    }
}
