//! Text normalization, WordPiece tokenization, vocabulary files and the
//! paraphrase augmenter.

mod paraphrase;
pub mod vocab;
mod wordpiece;

pub use paraphrase::{
    paraphrase_augment, Augmented, ParaphraseConfig, ParaphraseMode, Paraphraser, DIVERSITY_LEVELS,
};
pub use vocab::Vocab;
pub use wordpiece::{detokenize, wordpiece_tokenize, TokenizedText};

/// Lowercase, split on whitespace, and split punctuation into standalone words.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut cur = String::new();
        for c in lower.chars() {
            if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && c.is_ascii()) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else if c.is_whitespace() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Normalized words joined by single spaces.
pub fn normalize(text: &str) -> String {
    normalize_words(text).join(" ")
}
