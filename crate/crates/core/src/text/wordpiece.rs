use super::normalize_words;
use super::vocab::{Vocab, CONTINUATION, UNK};
use crate::error::{Error, Result};

/// Words longer than this (in chars) map straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

/// Token ids for one text, with the span of ids each normalized word produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub text: String,
    /// `(start, end)` into `ids` per word; words cut by truncation are clipped or dropped.
    pub word_spans: Vec<(usize, usize)>,
}

impl TokenizedText {
    pub fn empty() -> Self {
        Self {
            ids: Vec::new(),
            text: String::new(),
            word_spans: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Greedy longest-match-first pieces for one normalized word, or `None` if some
/// remainder has no vocabulary prefix.
fn word_pieces(word: &str, vocab: &Vocab) -> Option<Vec<u32>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let piece: String = chars[start..end].iter().collect();
            let cand = if start > 0 {
                format!("{CONTINUATION}{piece}")
            } else {
                piece
            };
            if let Some(id) = vocab.id(&cand) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        out.push(found?);
        start = end;
    }
    Some(out)
}

/// Lowercases, splits on whitespace and punctuation, then splits each word into
/// WordPiece tokens; truncates to `max_len` ids.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenizedText {
    let mut ids = Vec::new();
    let mut word_spans = Vec::new();
    for word in normalize_words(text) {
        if ids.len() >= max_len {
            break;
        }
        let start = ids.len();
        match word_pieces(&word, vocab) {
            Some(p) => ids.extend(p),
            None => ids.push(UNK),
        }
        ids.truncate(max_len);
        word_spans.push((start, ids.len()));
    }
    TokenizedText {
        ids,
        text: text.to_string(),
        word_spans,
    }
}

/// Joins pieces back into text: `##` pieces attach to the previous piece, words
/// are separated by single spaces.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::Index {
            what: "vocabulary",
            index: id as usize,
            size: vocab.len(),
        })?;
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) => out.push_str(rest),
            None => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}
