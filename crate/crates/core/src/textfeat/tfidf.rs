use serde::{Deserialize, Serialize};

use super::{build_vocabulary, Vocabulary, UNK};
use crate::error::Result;

/// Vocabulary plus smoothed idf weights fitted on training intervals.
///
/// `idf(t) = ln((1 + D) / (1 + df(t))) + 1` where `D` is the number of
/// training intervals; PAD and UNK get weight 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub vocab: Vocabulary,
    pub idf: Vec<f64>,
    pub num_docs: usize,
}

impl TfidfModel {
    /// Fits on `documents`, one token list per interval.
    pub fn fit(documents: &[Vec<String>], vocab_size: usize) -> Result<Self> {
        let vocab = build_vocabulary(documents, vocab_size)?;
        let d = documents.len() as f64;
        let idf = (0..vocab.len())
            .map(|i| {
                if i <= UNK {
                    0.0
                } else {
                    ((1.0 + d) / (1.0 + vocab.doc_freq(i) as f64)).ln() + 1.0
                }
            })
            .collect();
        Ok(Self {
            vocab,
            idf,
            num_docs: documents.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vocab.len()
    }

    pub fn vector(&self, tokens: &[String]) -> Vec<f64> {
        tfidf_vector(tokens, &self.vocab, &self.idf)
    }

    /// Same as [`TfidfModel::vector`] for already-encoded tokens; PAD and
    /// UNK ids are ignored.
    pub fn vector_from_ids(&self, ids: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab.len()];
        for &i in ids {
            if i > UNK && i < v.len() {
                v[i] += 1.0;
            }
        }
        weigh_and_normalize(v, &self.idf)
    }
}

/// Raw-count tf times idf over in-vocabulary tokens, L2-normalized. A bag
/// with no known tokens maps to the zero vector.
pub fn tfidf_vector(tokens: &[String], vocab: &Vocabulary, idf: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; vocab.len()];
    for t in tokens {
        if let Some(i) = vocab.get(t) {
            v[i] += 1.0;
        }
    }
    weigh_and_normalize(v, idf)
}

fn weigh_and_normalize(mut v: Vec<f64>, idf: &[f64]) -> Vec<f64> {
    for (x, w) in v.iter_mut().zip(idf) {
        *x *= w;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}
