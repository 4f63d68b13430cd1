#![allow(dead_code)]

use gemma_core::config::{ModelConfig, Preset};
use gemma_core::model::GemmaModel;
use gemma_core::text::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn nano() -> ModelConfig {
    Preset::Nano.config()
}

/// Random nano model with non-trivial norm gains.
pub fn nano_model(seed: u64) -> GemmaModel {
    let mut m = GemmaModel::random_init(nano(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut jitter = |g: &mut Vec<f32>| g.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    for b in &mut m.blocks {
        jitter(&mut b.attn_norm);
        jitter(&mut b.ffn_norm);
    }
    jitter(&mut m.final_norm);
    m
}

pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| TokenId(rng.random_range(0..vocab as u32))).collect()
}
