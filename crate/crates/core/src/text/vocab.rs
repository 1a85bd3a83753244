use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::normalize_words;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"];
pub const CONTINUATION: &str = "##";

/// Bijective token ↔ id table with the reserved tokens at ids 0..6.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Integrity(format!("reserved token {r} must have id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::Integrity(format!("invalid token at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Integrity(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Greedy frequency-based merge of character pieces up to `target_size` entries.
    ///
    /// Characters are admitted by descending frequency until they cover at least
    /// `min_char_coverage` of all character occurrences (1.0 admits every
    /// character, which makes tokenization of the corpus `[UNK]`-free). Word-initial
    /// and continuation forms (`c` and `##c`) are admitted as they occur.
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize, min_char_coverage: f64) -> Result<Self> {
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in normalize_words(line.as_ref()) {
                *word_freq.entry(w).or_default() += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::input("cannot build a vocabulary from an empty corpus"));
        }

        let mut char_freq: BTreeMap<char, usize> = BTreeMap::new();
        for (w, &f) in &word_freq {
            for c in w.chars() {
                *char_freq.entry(c).or_default() += f;
            }
        }
        let total: usize = char_freq.values().sum();
        let mut by_freq: Vec<(char, usize)> = char_freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut admitted = std::collections::BTreeSet::new();
        let mut covered = 0usize;
        for (c, f) in by_freq {
            if !admitted.is_empty() && covered as f64 >= min_char_coverage * total as f64 {
                break;
            }
            admitted.insert(c);
            covered += f;
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut push = |t: String, tokens: &mut Vec<String>| {
            if known.insert(t.clone()) {
                tokens.push(t);
            }
        };
        // Character forms in first-appearance order over the sorted word list.
        for w in word_freq.keys() {
            for (i, c) in w.chars().enumerate() {
                if admitted.contains(&c) {
                    let t = if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") };
                    push(t, &mut tokens);
                }
            }
        }
        if tokens.len() > target_size {
            return Err(Error::input(format!(
                "target size {target_size} cannot hold {} reserved and character tokens",
                tokens.len()
            )));
        }

        // Each word as a list of pieces; words with unadmitted characters never merge.
        let mut words: Vec<(Vec<String>, usize)> = word_freq
            .iter()
            .filter(|(w, _)| w.chars().all(|c| admitted.contains(&c)))
            .map(|(w, &f)| {
                let pieces = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                    .collect();
                (pieces, f)
            })
            .collect();

        while tokens.len() < target_size {
            let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
            for (pieces, f) in &words {
                for w in pieces.windows(2) {
                    *pairs.entry((w[0].clone(), w[1].clone())).or_default() += f;
                }
            }
            // Highest count; ties broken by the smallest merged string.
            let best = pairs
                .into_iter()
                .map(|((a, b), n)| {
                    let merged = merge_pieces(&a, &b);
                    (n, merged, a, b)
                })
                .max_by(|x, y| x.0.cmp(&y.0).then_with(|| y.1.cmp(&x.1)));
            let Some((_, merged, a, b)) = best else { break };
            for (pieces, _) in &mut words {
                let mut out = Vec::with_capacity(pieces.len());
                let mut i = 0;
                while i < pieces.len() {
                    if i + 1 < pieces.len() && pieces[i] == a && pieces[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(pieces[i].clone());
                        i += 1;
                    }
                }
                *pieces = out;
            }
            push(merged, &mut tokens);
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// One token per line, `\n`-terminated, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::from_tokens(body.split('\n').map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn merge_pieces(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}
