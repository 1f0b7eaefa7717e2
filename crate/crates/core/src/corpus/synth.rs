//! Seeded generator of labeled repost streams with a stance changepoint.
//!
//! Every repost draws its tokens from four stance pools (neutral, support,
//! doubt, refute). Before a stream's changepoint both classes use the same
//! mixture; afterwards rumors lean towards doubt/refute and non-rumors
//! towards support.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use super::{Repost, RepostStream};
use crate::error::{CedError, Result};

pub const NEUTRAL_PREFIX: &str = "neu";
pub const SUPPORT_PREFIX: &str = "sup";
pub const DOUBT_PREFIX: &str = "dbt";
pub const REFUTE_PREFIX: &str = "ref";

/// Probabilities of drawing a token from each stance pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StanceMix {
    pub neutral: f64,
    pub support: f64,
    pub doubt: f64,
    pub refute: f64,
}

impl StanceMix {
    fn as_array(&self) -> [f64; 4] {
        [self.neutral, self.support, self.doubt, self.refute]
    }

    fn validate(&self, name: &str) -> Result<()> {
        let p = self.as_array();
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(CedError::Config(format!("{name}: probabilities must be non-negative")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CedError::Config(format!(
                "{name}: stance probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub neutral_vocab: usize,
    pub support_vocab: usize,
    pub doubt_vocab: usize,
    pub refute_vocab: usize,
    /// Mean of the Poisson repost count.
    pub mean_reposts: f64,
    pub min_reposts: usize,
    /// Changepoint position as a fraction of the stream length.
    pub changepoint: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub empty_repost_prob: f64,
    pub original_tokens: usize,
    pub pre: StanceMix,
    pub post_rumor: StanceMix,
    pub post_nonrumor: StanceMix,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            neutral_vocab: 80,
            support_vocab: 30,
            doubt_vocab: 30,
            refute_vocab: 30,
            mean_reposts: 80.0,
            min_reposts: 3,
            changepoint: 0.3,
            min_tokens: 2,
            max_tokens: 6,
            empty_repost_prob: 0.1,
            original_tokens: 8,
            pre: StanceMix {
                neutral: 0.55,
                support: 0.15,
                doubt: 0.15,
                refute: 0.15,
            },
            post_rumor: StanceMix {
                neutral: 0.30,
                support: 0.05,
                doubt: 0.35,
                refute: 0.30,
            },
            post_nonrumor: StanceMix {
                neutral: 0.30,
                support: 0.60,
                doubt: 0.05,
                refute: 0.05,
            },
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        self.pre.validate("pre")?;
        self.post_rumor.validate("post_rumor")?;
        self.post_nonrumor.validate("post_nonrumor")?;
        if !(0.0..=1.0).contains(&self.changepoint) {
            return Err(CedError::Config(format!(
                "changepoint must be in [0,1], got {}",
                self.changepoint
            )));
        }
        if !(self.mean_reposts > 0.0 && self.mean_reposts.is_finite()) {
            return Err(CedError::Config("mean_reposts must be positive".into()));
        }
        if self.min_reposts == 0 {
            return Err(CedError::Config("min_reposts must be at least 1".into()));
        }
        if self.min_tokens > self.max_tokens {
            return Err(CedError::Config("min_tokens exceeds max_tokens".into()));
        }
        if !(0.0..1.0).contains(&self.empty_repost_prob) {
            return Err(CedError::Config("empty_repost_prob must be in [0,1)".into()));
        }
        let pools = [
            (
                self.neutral_vocab,
                self.pre.neutral + self.post_rumor.neutral + self.post_nonrumor.neutral,
            ),
            (
                self.support_vocab,
                self.pre.support + self.post_rumor.support + self.post_nonrumor.support,
            ),
            (
                self.doubt_vocab,
                self.pre.doubt + self.post_rumor.doubt + self.post_nonrumor.doubt,
            ),
            (
                self.refute_vocab,
                self.pre.refute + self.post_rumor.refute + self.post_nonrumor.refute,
            ),
        ];
        if pools.iter().any(|(size, mass)| *size == 0 && *mass > 0.0) {
            return Err(CedError::Config(
                "a stance pool with probability mass has no words".into(),
            ));
        }
        if self.neutral_vocab == 0 && self.original_tokens > 0 {
            return Err(CedError::Config("original text needs neutral words".into()));
        }
        Ok(())
    }

    fn pool(&self, stance: usize) -> (&'static str, usize) {
        match stance {
            0 => (NEUTRAL_PREFIX, self.neutral_vocab),
            1 => (SUPPORT_PREFIX, self.support_vocab),
            2 => (DOUBT_PREFIX, self.doubt_vocab),
            _ => (REFUTE_PREFIX, self.refute_vocab),
        }
    }
}

/// Generated streams plus the changepoint index (in reposts) of each.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub streams: Vec<RepostStream>,
    pub changepoints: Vec<usize>,
}

impl SyntheticCorpus {
    /// Mean of changepoint / stream length.
    pub fn mean_changepoint_fraction(&self) -> f64 {
        let total: f64 = self
            .streams
            .iter()
            .zip(&self.changepoints)
            .map(|(s, &cp)| cp as f64 / s.reposts.len() as f64)
            .sum();
        total / self.streams.len().max(1) as f64
    }

    pub fn mean_reposts(&self) -> f64 {
        let total: usize = self.streams.iter().map(|s| s.reposts.len()).sum();
        total as f64 / self.streams.len().max(1) as f64
    }
}

pub fn generate_synthetic(n_streams: usize, seed: u64, params: &GeneratorParams) -> Result<Vec<RepostStream>> {
    Ok(generate_synthetic_with_meta(n_streams, seed, params)?.streams)
}

pub fn generate_synthetic_with_meta(n_streams: usize, seed: u64, params: &GeneratorParams) -> Result<SyntheticCorpus> {
    if n_streams < 2 {
        return Err(CedError::invalid(format!("need at least 2 streams, got {n_streams}")));
    }
    params.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length_dist = Poisson::new(params.mean_reposts).map_err(|e| CedError::Config(format!("mean_reposts: {e}")))?;
    let gap_dist = Exp::new(1.0f64 / 60.0).expect("positive rate");

    let mut streams = Vec::with_capacity(n_streams);
    let mut changepoints = Vec::with_capacity(n_streams);
    for idx in 0..n_streams {
        let label = u8::from(rng.random_bool(0.5));
        let len = (length_dist.sample(&mut rng) as usize).max(params.min_reposts);
        let cp = (params.changepoint * len as f64).round() as usize;

        let original_text = (0..params.original_tokens)
            .map(|_| word(&mut rng, params, 0))
            .collect::<Vec<_>>()
            .join(" ");

        let post = if label == 1 {
            &params.post_rumor
        } else {
            &params.post_nonrumor
        };
        let mut t = 1_500_000_000u64 + rng.random_range(0..10_000_000u64);
        let mut reposts = Vec::with_capacity(len);
        for i in 0..len {
            t += gap_dist.sample(&mut rng).round() as u64;
            let mix = if i < cp { &params.pre } else { post };
            let text = if rng.random_bool(params.empty_repost_prob) {
                String::new()
            } else {
                let n_tok = rng.random_range(params.min_tokens..=params.max_tokens);
                (0..n_tok)
                    .map(|_| {
                        let stance = pick_stance(&mut rng, mix);
                        word(&mut rng, params, stance)
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            reposts.push(Repost { timestamp: t, text });
        }
        streams.push(RepostStream::new(
            format!("syn{idx:06}"),
            label,
            original_text,
            reposts,
        )?);
        changepoints.push(cp);
    }
    Ok(SyntheticCorpus { streams, changepoints })
}

fn pick_stance(rng: &mut ChaCha8Rng, mix: &StanceMix) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in mix.as_array().iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: fall back to the last pool with mass
    mix.as_array().iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn word(rng: &mut ChaCha8Rng, params: &GeneratorParams, stance: usize) -> String {
    let (prefix, size) = params.pool(stance);
    format!("{prefix}{}", rng.random_range(0..size))
}
