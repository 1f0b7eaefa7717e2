//! A complete detector: fitted featurizers, recurrent encoder (or linear
//! head) and readout vector, with training and streaming passes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FeaturizerMode, TrainConfig};
use crate::corpus::{partition, RepostStream};
use crate::detect::StreamScorer;
use crate::encoder::StackedGru;
use crate::error::{CedError, Result};
use crate::numerics::{
    decode_checkpoint, encode_checkpoint, sigmoid, uniform_tensor, Gradients, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::objective::{ced_loss, CrediblePoint};
use crate::textfeat::{
    build_vocabulary, interval_tokens, tokenize, ConvFeaturizer, IntervalInput, RepostFeaturizer, TfidfModel,
    Vocabulary,
};

const REPOST_CONV: &str = "conv.repost";
const OM_CONV: &str = "conv.om";

#[derive(Debug, Clone)]
pub struct OriginalEncoder {
    pub vocab: Vocabulary,
    pub conv: ConvFeaturizer,
}

#[derive(Debug, Clone)]
pub enum Head {
    Recurrent { gru: StackedGru, readout: ParamId },
    Linear { weight: ParamId, bias: ParamId },
}

/// Stream converted to model inputs once, reused across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedStream {
    pub id: String,
    pub label: u8,
    pub inputs: Vec<IntervalInput>,
    pub original: Option<Vec<usize>>,
}

impl PreparedStream {
    pub fn num_steps(&self) -> usize {
        self.inputs.len()
    }
}

/// Result of one forward (and optionally backward) pass over a stream.
#[derive(Debug, Clone)]
pub struct StreamPass {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub point: CrediblePoint,
    pub grads: Option<Gradients>,
    /// See [`Graph::signature`].
    pub signature: u64,
}

#[derive(Debug, Clone)]
pub struct CedModel {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub featurizer: RepostFeaturizer,
    pub original: Option<OriginalEncoder>,
    pub head: Head,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: TrainConfig,
    tfidf: Option<TfidfModel>,
    repost_vocab: Option<Vocabulary>,
    om_vocab: Option<Vocabulary>,
}

impl CedModel {
    /// Fits vocabularies on `train` and initialises parameters from the
    /// configured seed.
    pub fn init(config: &TrainConfig, train: &[&RepostStream]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(CedError::invalid("no training streams"));
        }
        let config = config.resolved();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();

        let originals: Vec<Vec<String>> = train.iter().map(|s| tokenize(&s.original_text)).collect();
        let featurizer = match config.featurizer_mode() {
            FeaturizerMode::Tfidf => {
                let mut docs = Vec::new();
                for s in train {
                    let seq = partition(s, config.interval_size)?;
                    docs.extend(seq.intervals.iter().map(|iv| interval_tokens(iv)));
                }
                RepostFeaturizer::Tfidf(TfidfModel::fit(&docs, config.tfidf_dim)?)
            }
            FeaturizerMode::Cnn => {
                let mut docs: Vec<Vec<String>> = train
                    .iter()
                    .flat_map(|s| s.reposts.iter().map(|r| tokenize(&r.text)))
                    .collect();
                docs.extend(originals.iter().cloned());
                let vocab = build_vocabulary(&docs, config.repost_vocab)?;
                let conv = ConvFeaturizer::init(&mut params, REPOST_CONV, vocab.len(), &config.conv, &mut rng)?;
                RepostFeaturizer::Cnn { vocab, conv }
            }
        };

        let original = if config.uses_original_message() {
            let vocab = build_vocabulary(&originals, config.om_vocab)?;
            let conv = ConvFeaturizer::init(&mut params, OM_CONV, vocab.len(), &config.om_conv, &mut rng)?;
            Some(OriginalEncoder { vocab, conv })
        } else {
            None
        };

        let head = if config.variant.is_linear() {
            let weight = params.add("lin.w", Tensor::zeros(&[featurizer.dim()]))?;
            let bias = params.add("lin.b", Tensor::zeros(&[1]))?;
            Head::Linear { weight, bias }
        } else {
            let gru = StackedGru::init(
                &mut params,
                featurizer.dim(),
                &config.hidden(),
                config.gru_bias,
                &mut rng,
            )?;
            let dim = gru.output_dim() + original.as_ref().map_or(0, |o| o.conv.output_dim());
            let readout = params.add("s", uniform_tensor(&mut rng, &[dim], 1.0 / (dim as f64).sqrt()))?;
            Head::Recurrent { gru, readout }
        };

        Ok(Self {
            config,
            params,
            featurizer,
            original,
            head,
        })
    }

    pub fn is_full_sequence(&self) -> bool {
        self.config.variant.is_full_sequence()
    }

    /// Number of intervals the model consumes for `stream`.
    pub fn steps_for(&self, stream: &RepostStream) -> usize {
        let n = stream.num_intervals(self.config.interval_size);
        match self.config.featurizer_mode() {
            FeaturizerMode::Cnn => n.min(self.config.max_intervals),
            FeaturizerMode::Tfidf => n,
        }
    }

    pub fn prepare(&self, stream: &RepostStream) -> Result<PreparedStream> {
        let seq = partition(stream, self.config.interval_size)?;
        let keep = self.steps_for(stream);
        let inputs = seq.intervals[..keep]
            .iter()
            .map(|iv| match (&self.head, &self.featurizer) {
                (Head::Linear { .. }, RepostFeaturizer::Tfidf(m)) => {
                    IntervalInput::Tokens(m.vocab.encode(&interval_tokens(iv)))
                }
                _ => self.featurizer.prepare(iv),
            })
            .collect();
        let original = self
            .original
            .as_ref()
            .map(|o| o.vocab.encode(&tokenize(&stream.original_text)));
        Ok(PreparedStream {
            id: stream.id.clone(),
            label: stream.label,
            inputs,
            original,
        })
    }

    /// Walks the first `visible` steps, calling `visit(step, logit)` after
    /// each; stops early when `visit` returns false. The linear head scores
    /// the merged bag of all intervals seen so far.
    fn walk(
        &self,
        g: &mut Graph<'_>,
        p: &PreparedStream,
        visible: usize,
        visit: &mut dyn FnMut(&Graph<'_>, usize, Var) -> bool,
    ) -> Result<()> {
        let visible = visible.min(p.num_steps());
        if visible == 0 {
            return Err(CedError::invalid(format!("stream {} has no visible intervals", p.id)));
        }
        match &self.head {
            Head::Linear { weight, bias } => {
                let RepostFeaturizer::Tfidf(m) = &self.featurizer else {
                    return Err(CedError::invalid("linear head needs tfidf features"));
                };
                let w = g.param(*weight);
                let b = g.param(*bias);
                let mut ids = Vec::new();
                for (i, input) in p.inputs[..visible].iter().enumerate() {
                    match input {
                        IntervalInput::Tokens(t) => ids.extend_from_slice(t),
                        IntervalInput::Dense(_) => return Err(CedError::invalid("linear head expects token inputs")),
                    }
                    let x = g.constant(Tensor::vector(m.vector_from_ids(&ids)))?;
                    let wx = g.dot(w, x)?;
                    let logit = g.add(wx, b)?;
                    if !visit(g, i + 1, logit) {
                        break;
                    }
                }
            }
            Head::Recurrent { gru, readout } => {
                let r = match (&self.original, &p.original) {
                    (Some(o), Some(ids)) => Some(o.conv.forward(g, ids)?),
                    (None, _) => None,
                    (Some(_), None) => return Err(CedError::invalid("prepared stream lacks original tokens")),
                };
                let s = g.param(*readout);
                let mut state = gru.zero_state(g)?;
                for (i, input) in p.inputs[..visible].iter().enumerate() {
                    let x = self.featurizer.feature(g, input)?;
                    let h = gru.step(g, x, &mut state)?;
                    let h = match r {
                        Some(r) => g.concat(&[h, r])?,
                        None => h,
                    };
                    let logit = g.dot(h, s)?;
                    if !visit(g, i + 1, logit) {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    /// Loss of one stream under the configured objective; gradients are
    /// computed when `with_grad` is set.
    pub fn stream_pass(&self, p: &PreparedStream, with_grad: bool) -> Result<StreamPass> {
        self.stream_pass_with(&self.params, p, with_grad)
    }

    /// Same as [`CedModel::stream_pass`] but reading parameters from
    /// `params` (which must share this model's layout).
    pub fn stream_pass_with(&self, params: &ParamStore, p: &PreparedStream, with_grad: bool) -> Result<StreamPass> {
        let mut g = Graph::new(params);
        let mut logits = Vec::with_capacity(p.num_steps());
        self.walk(&mut g, p, p.num_steps(), &mut |_, _, l| {
            logits.push(l);
            true
        })?;
        let (loss, point) = ced_loss(&mut g, &logits, p.label, &self.config.objective())?;
        let grads = if with_grad { Some(g.backward(loss)?) } else { None };
        Ok(StreamPass {
            loss: g.scalar(loss),
            probs: logits.iter().map(|&l| sigmoid(g.scalar(l))).collect(),
            point,
            grads,
            signature: g.signature(),
        })
    }

    /// Streaming probabilities over the first `visible` steps.
    pub fn scan_prepared(
        &self,
        p: &PreparedStream,
        visible: usize,
        visit: &mut dyn FnMut(usize, f64) -> bool,
    ) -> Result<()> {
        let mut g = Graph::new(&self.params);
        self.walk(&mut g, p, visible, &mut |g, step, logit| {
            visit(step, sigmoid(g.scalar(logit)))
        })
    }

    fn meta(&self) -> ModelMeta {
        let (tfidf, repost_vocab) = match &self.featurizer {
            RepostFeaturizer::Tfidf(m) => (Some(m.clone()), None),
            RepostFeaturizer::Cnn { vocab, .. } => (None, Some(vocab.clone())),
        };
        ModelMeta {
            config: self.config.clone(),
            tfidf,
            repost_vocab,
            om_vocab: self.original.as_ref().map(|o| o.vocab.clone()),
        }
    }

    pub fn to_checkpoint_bytes(&self, step: u64) -> Result<Vec<u8>> {
        let extra = serde_json::to_value(self.meta())?;
        encode_checkpoint(&self.config.hash(), step, extra, &self.params)
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_checkpoint_bytes(step)?;
        std::fs::write(path, bytes).map_err(|e| CedError::io(path, e))
    }

    /// Rebuilds a model from checkpoint bytes; returns it with the stored step.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, u64)> {
        let (header, params) = decode_checkpoint(bytes)?;
        let meta: ModelMeta = serde_json::from_value(header.extra)?;
        let config = meta.config;
        if config.hash() != header.config_hash {
            return Err(CedError::Checkpoint(
                "config hash does not match stored configuration".into(),
            ));
        }
        let featurizer = match config.featurizer_mode() {
            FeaturizerMode::Tfidf => RepostFeaturizer::Tfidf(
                meta.tfidf
                    .ok_or_else(|| CedError::Checkpoint("missing tfidf model".into()))?,
            ),
            FeaturizerMode::Cnn => RepostFeaturizer::Cnn {
                vocab: meta
                    .repost_vocab
                    .ok_or_else(|| CedError::Checkpoint("missing repost vocabulary".into()))?,
                conv: ConvFeaturizer::bind(&params, REPOST_CONV, &config.conv)?,
            },
        };
        let original = if config.uses_original_message() {
            Some(OriginalEncoder {
                vocab: meta
                    .om_vocab
                    .ok_or_else(|| CedError::Checkpoint("missing original-message vocabulary".into()))?,
                conv: ConvFeaturizer::bind(&params, OM_CONV, &config.om_conv)?,
            })
        } else {
            None
        };
        let head = if config.variant.is_linear() {
            Head::Linear {
                weight: params.require("lin.w")?,
                bias: params.require("lin.b")?,
            }
        } else {
            Head::Recurrent {
                gru: StackedGru::bind(&params, config.hidden().len(), config.gru_bias)?,
                readout: params.require("s")?,
            }
        };
        Ok((
            Self {
                config,
                params,
                featurizer,
                original,
                head,
            },
            header.step,
        ))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CedError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

impl StreamScorer for CedModel {
    fn num_steps(&self, stream: &RepostStream) -> usize {
        self.steps_for(stream)
    }

    fn full_sequence(&self) -> bool {
        self.is_full_sequence()
    }

    fn scan(&self, stream: &RepostStream, visible: usize, visit: &mut dyn FnMut(usize, f64) -> bool) -> Result<()> {
        let p = self.prepare(stream)?;
        self.scan_prepared(&p, visible, visit)
    }
}
