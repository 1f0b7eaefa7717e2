#![allow(dead_code)]

use ced_core::corpus::{generate_synthetic, GeneratorParams, RepostStream};
use ced_core::textfeat::ConvSpec;
use ced_core::{TrainConfig, Variant};

pub fn small_conv(embed_dim: usize, widths: &[usize], filters: usize, pad_len: usize) -> ConvSpec {
    ConvSpec {
        embed_dim,
        widths: widths.to_vec(),
        filters_per_width: filters,
        pad_len,
    }
}

/// A model small enough for finite differences.
pub fn toy_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        hidden_dims: Some(vec![8, 8]),
        tfidf_dim: 40,
        repost_vocab: 60,
        om_vocab: 30,
        conv: small_conv(8, &[2, 3], 2, 12),
        om_conv: small_conv(8, &[2, 3], 2, 8),
        seed,
        ..TrainConfig::for_variant(variant)
    }
}

/// A model small enough to train in seconds.
pub fn desk_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        hidden_dims: Some(vec![16, 16]),
        tfidf_dim: 300,
        repost_vocab: 400,
        om_vocab: 200,
        conv: small_conv(16, &[2, 3], 8, 40),
        om_conv: small_conv(8, &[2, 3], 4, 12),
        learning_rate: 0.01,
        epochs: 8,
        log_every: 50,
        seed,
        ..TrainConfig::for_variant(variant)
    }
}

pub fn synthetic(n: usize, seed: u64, changepoint: f64, mean_reposts: f64) -> Vec<RepostStream> {
    let params = GeneratorParams {
        changepoint,
        mean_reposts,
        ..GeneratorParams::default()
    };
    generate_synthetic(n, seed, &params).unwrap()
}

pub fn refs(v: &[RepostStream]) -> Vec<&RepostStream> {
    v.iter().collect()
}

/// Redraws every parameter uniformly in `(-scale, scale)`. Freshly
/// initialised models have many gradients below finite-difference
/// resolution; a generic point avoids that.
pub fn scramble(model: &mut ced_core::CedModel, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for x in model.params.get_mut(id).data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}
