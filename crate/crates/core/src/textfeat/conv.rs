use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PAD;
use crate::error::{CedError, Result};
use crate::numerics::{uniform_tensor, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub embed_dim: usize,
    pub widths: Vec<usize>,
    pub filters_per_width: usize,
    /// Token sequences are padded with PAD or truncated to this length.
    pub pad_len: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            embed_dim: 50,
            widths: vec![4, 5],
            filters_per_width: 50,
            pad_len: 64,
        }
    }
}

impl ConvSpec {
    pub fn output_dim(&self) -> usize {
        self.widths.len() * self.filters_per_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.filters_per_width == 0 || self.widths.is_empty() {
            return Err(CedError::Config(
                "convolution needs embed_dim, widths and filters".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(CedError::Config("window widths must be at least 1".into()));
        }
        let max_w = *self.widths.iter().max().expect("non-empty");
        if self.pad_len < max_w {
            return Err(CedError::Config(format!(
                "pad length {} is shorter than the widest window {max_w}",
                self.pad_len
            )));
        }
        Ok(())
    }
}

/// Filters sharing one window width. `weight` is `[width * d, filters]`:
/// column `f` is filter `f` flattened position by position, matching the
/// rows produced by [`Graph::unfold`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank {
    pub width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Embedding lookup, one convolution bank per width, ReLU and max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFeaturizer {
    pub embedding: ParamId,
    pub banks: Vec<ConvBank>,
    pub spec: ConvSpec,
}

impl ConvFeaturizer {
    /// Registers freshly initialised parameters under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        spec: &ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let embedding = store.add(format!("{prefix}.emb"), uniform_tensor(rng, &[vocab_size, d], 0.1))?;
        let mut banks = Vec::with_capacity(spec.widths.len());
        for &w in &spec.widths {
            let fan_in = w * d;
            let bound = (6.0 / (fan_in + spec.filters_per_width) as f64).sqrt();
            let weight = store.add(
                format!("{prefix}.w{w}"),
                uniform_tensor(rng, &[fan_in, spec.filters_per_width], bound),
            )?;
            let bias = store.add(
                format!("{prefix}.b{w}"),
                crate::numerics::Tensor::zeros(&[spec.filters_per_width]),
            )?;
            banks.push(ConvBank { width: w, weight, bias });
        }
        Ok(Self {
            embedding,
            banks,
            spec: spec.clone(),
        })
    }

    /// Looks up parameters previously registered under `prefix`.
    pub fn bind(store: &ParamStore, prefix: &str, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let embedding = store.require(&format!("{prefix}.emb"))?;
        let banks = spec
            .widths
            .iter()
            .map(|&w| {
                Ok(ConvBank {
                    width: w,
                    weight: store.require(&format!("{prefix}.w{w}"))?,
                    bias: store.require(&format!("{prefix}.b{w}"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding,
            banks,
            spec: spec.clone(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.banks.len() * self.spec.filters_per_width
    }

    /// Pads with PAD or truncates `token_ids` to the configured length.
    pub fn pad(&self, token_ids: &[usize]) -> Vec<usize> {
        let n = self.spec.pad_len;
        let mut ids: Vec<usize> = token_ids.iter().copied().take(n).collect();
        ids.resize(n, PAD);
        ids
    }

    pub fn forward(&self, g: &mut Graph<'_>, token_ids: &[usize]) -> Result<Var> {
        let ids = self.pad(token_ids);
        let table = g.param(self.embedding);
        let words = g.gather(table, &ids)?;
        let mut pooled = Vec::with_capacity(self.banks.len());
        for bank in &self.banks {
            if bank.width > ids.len() {
                return Err(CedError::invalid(format!(
                    "window width {} exceeds padded length {}",
                    bank.width,
                    ids.len()
                )));
            }
            let windows = g.unfold(words, bank.width)?;
            let w = g.param(bank.weight);
            let b = g.param(bank.bias);
            let conv = g.matmul(windows, w)?;
            let conv = g.add_row_bias(conv, b)?;
            let act = g.relu(conv)?;
            pooled.push(g.max_rows(act)?);
        }
        g.concat(&pooled)
    }
}

/// Value-level convenience wrapper around [`ConvFeaturizer::forward`].
pub fn conv_text_feature(token_ids: &[usize], params: &ParamStore, featurizer: &ConvFeaturizer) -> Result<Vec<f64>> {
    let mut g = Graph::new(params);
    let v = featurizer.forward(&mut g, token_ids)?;
    Ok(g.value(v).data().to_vec())
}
