//! CIDEr and CIDEr-D consensus scores over tokenized captions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
/// Gaussian length-penalty width for CIDEr-D.
pub const SIGMA: f64 = 6.0;

type Counts<T> = BTreeMap<Vec<T>, usize>;

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> Counts<T> {
    let mut c = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *c.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    c
}

/// Document frequencies of n-grams (n = 1..=4) over a reference corpus, where
/// each document is one image's reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct IdfTable<T: Ord> {
    df: [BTreeMap<Vec<T>, usize>; MAX_N],
    n_docs: usize,
}

impl<T: Ord + Clone> IdfTable<T> {
    pub fn build(corpus: &[Vec<Vec<T>>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::input("IDF corpus has no images"));
        }
        let mut df: [BTreeMap<Vec<T>, usize>; MAX_N] = Default::default();
        for refs in corpus {
            for (n, table) in df.iter_mut().enumerate() {
                let present: BTreeSet<Vec<T>> = refs
                    .iter()
                    .flat_map(|r| ngram_counts(r, n + 1).into_keys())
                    .collect();
                for g in present {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            df,
            n_docs: corpus.len(),
        })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, gram: &[T]) -> usize {
        match gram.len() {
            n @ 1..=MAX_N => self.df[n - 1].get(gram).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// `ln(|I| / max(df, 1))`; unseen n-grams get the largest weight.
    pub fn idf(&self, gram: &[T]) -> f64 {
        (self.n_docs as f64).ln() - (self.df(gram).max(1) as f64).ln()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiderVariant {
    /// Clipped similarity with a Gaussian length penalty.
    #[default]
    CiderD,
    /// Plain cosine, no clipping or length penalty.
    Cider,
}

/// Term-frequency · idf vector and its norm.
fn weighted<T: Ord + Clone>(tokens: &[T], n: usize, idf: &IdfTable<T>) -> (BTreeMap<Vec<T>, f64>, f64) {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    let vec: BTreeMap<Vec<T>, f64> = counts
        .into_iter()
        .map(|(g, c)| {
            let w = c as f64 / total as f64 * idf.idf(&g);
            (g, w)
        })
        .collect();
    let norm = vec.values().map(|w| w * w).sum::<f64>().sqrt();
    (vec, norm)
}

/// Score of `candidate` against `references`, averaged over references and
/// n = 1..=4 and scaled by 10. Zero-norm vectors contribute 0.
pub fn cider<T: Ord + Clone>(candidate: &[T], references: &[Vec<T>], idf: &IdfTable<T>, variant: CiderVariant) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let mut score = 0.0;
    for n in 1..=MAX_N {
        let (vc, nc) = weighted(candidate, n, idf);
        let mut per_n = 0.0;
        for r in references {
            let (vr, nr) = weighted(r, n, idf);
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc
                .iter()
                .filter_map(|(g, &wc)| {
                    let wr = *vr.get(g)?;
                    Some(match variant {
                        CiderVariant::CiderD => wc.min(wr) * wr,
                        CiderVariant::Cider => wc * wr,
                    })
                })
                .sum();
            let mut sim = dot / (nc * nr);
            if variant == CiderVariant::CiderD {
                let dl = candidate.len() as f64 - r.len() as f64;
                sim *= (-(dl * dl) / (2.0 * SIGMA * SIGMA)).exp();
            }
            per_n += sim;
        }
        score += per_n / references.len() as f64;
    }
    score / MAX_N as f64 * 10.0
}

/// CIDEr-D, the default reward.
pub fn cider_d<T: Ord + Clone>(candidate: &[T], references: &[Vec<T>], idf: &IdfTable<T>) -> f64 {
    cider(candidate, references, idf, CiderVariant::CiderD)
}

/// Mean score of one candidate per image against that image's references.
pub fn corpus_cider<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    idf: &IdfTable<T>,
    variant: CiderVariant,
) -> Result<f64> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::dim("corpus cider", &[candidates.len()], &[references.len()]));
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider(c, r, idf, variant))
        .sum();
    Ok(total / candidates.len() as f64)
}
