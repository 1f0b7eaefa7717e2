//! Tokenization, vocabularies and the two interval featurizers: TF-IDF
//! bags and a convolutional encoder with max-over-time pooling.

mod conv;
mod tfidf;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{IntervalSequence, Repost};
use crate::error::{CedError, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub use conv::{conv_text_feature, ConvBank, ConvFeaturizer, ConvSpec};
pub use tfidf::{tfidf_vector, TfidfModel};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tokens of all reposts in an interval, in order.
pub fn interval_tokens(interval: &[Repost]) -> Vec<String> {
    interval.iter().flat_map(|r| tokenize(&r.text)).collect()
}

/// Dense token index with `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    doc_freq: Vec<usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, doc_freq: Vec<usize>) -> Result<Self> {
        let index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != tokens.len() {
            return Err(CedError::invalid("vocabulary has duplicate tokens"));
        }
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(CedError::invalid("vocabulary must start with <pad>, <unk>"));
        }
        Ok(Self {
            tokens,
            index,
            doc_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of an in-vocabulary token (never PAD/UNK for real text).
    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i > UNK)
    }

    /// Index of `token`, or `UNK`.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(String::as_str)
    }

    /// Document frequency recorded at build time; zero after deserializing.
    pub fn doc_freq(&self, idx: usize) -> usize {
        self.doc_freq.get(idx).copied().unwrap_or(0)
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![String::new(); map.len()];
        for (t, &i) in map {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| CedError::invalid(format!("vocabulary index {i} is not dense")))?;
            *slot = t.clone();
        }
        Self::from_tokens(tokens, Vec::new())
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        Vocabulary::from_map(&map).map_err(serde::de::Error::custom)
    }
}

/// Keeps the `size - 2` tokens with the highest document frequency (ties
/// broken lexicographically) after PAD and UNK.
pub fn build_vocabulary(corpus: &[Vec<String>], size: usize) -> Result<Vocabulary> {
    if size < 3 {
        return Err(CedError::invalid(format!(
            "vocabulary size must be at least 3, got {size}"
        )));
    }
    if corpus.is_empty() {
        return Err(CedError::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        let unique: HashSet<&str> = doc.iter().map(String::as_str).collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(size - 2);

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    let mut freq = vec![0, 0];
    for (t, f) in ranked {
        tokens.push(t.to_string());
        freq.push(f);
    }
    Vocabulary::from_tokens(tokens, freq)
}

/// Per-interval feature columns of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrace {
    pub stream_id: String,
    pub dim: usize,
    pub columns: Vec<Vec<f64>>,
}

/// Precomputed input for one interval.
#[derive(Debug, Clone, PartialEq)]
pub enum IntervalInput {
    Dense(Vec<f64>),
    Tokens(Vec<usize>),
}

/// How interval text becomes a feature vector.
#[derive(Debug, Clone)]
pub enum RepostFeaturizer {
    Tfidf(TfidfModel),
    Cnn { vocab: Vocabulary, conv: ConvFeaturizer },
}

impl RepostFeaturizer {
    pub fn dim(&self) -> usize {
        match self {
            RepostFeaturizer::Tfidf(m) => m.dim(),
            RepostFeaturizer::Cnn { conv, .. } => conv.output_dim(),
        }
    }

    pub fn prepare(&self, interval: &[Repost]) -> IntervalInput {
        let tokens = interval_tokens(interval);
        match self {
            RepostFeaturizer::Tfidf(m) => IntervalInput::Dense(m.vector(&tokens)),
            RepostFeaturizer::Cnn { vocab, .. } => IntervalInput::Tokens(vocab.encode(&tokens)),
        }
    }

    /// Feature vector of a prepared interval as a graph variable; gradients
    /// reach the convolution parameters in CNN mode.
    pub fn feature(&self, g: &mut Graph<'_>, input: &IntervalInput) -> Result<Var> {
        match (self, input) {
            (RepostFeaturizer::Tfidf(_), IntervalInput::Dense(v)) => g.constant(Tensor::vector(v.clone())),
            (RepostFeaturizer::Cnn { conv, .. }, IntervalInput::Tokens(ids)) => conv.forward(g, ids),
            _ => Err(CedError::invalid("interval input does not match featurizer mode")),
        }
    }
}

/// Feature matrix (one column per interval) of a partitioned stream.
pub fn featurize_intervals(
    seq: &IntervalSequence,
    featurizer: &RepostFeaturizer,
    params: &ParamStore,
) -> Result<FeatureTrace> {
    let mut columns = Vec::with_capacity(seq.len());
    for interval in &seq.intervals {
        let input = featurizer.prepare(interval);
        let mut g = Graph::new(params);
        let v = featurizer.feature(&mut g, &input)?;
        columns.push(g.value(v).data().to_vec());
    }
    Ok(FeatureTrace {
        stream_id: seq.stream_id.clone(),
        dim: featurizer.dim(),
        columns,
    })
}
