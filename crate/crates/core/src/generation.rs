//! Prefill + cached incremental decoding with greedy or temperature sampling.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `SamplerParams::seed`. A temperature draw takes one `f64` uniform in
//! `[0, 1)` and walks the cumulative distribution in ascending id order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{GemmaModel, ModelError};
use crate::text::TokenId;

pub type SamplerRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("logits contain a non-finite value")]
    NonFiniteLogits,
    #[error("empty logits")]
    EmptyLogits,
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("prompt of {prompt} tokens plus {new} new tokens exceeds the context of {max_context}")]
    ContextOverflow { prompt: usize, new: usize, max_context: usize },
    #[error("invalid sampler parameters: {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    Greedy,
    Temperature(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    pub mode: SamplingMode,
    pub top_k: Option<usize>,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub stop_ids: Vec<TokenId>,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            top_k: None,
            seed: 0,
            max_new_tokens: 32,
            stop_ids: vec![TokenId::END_OF_TURN, TokenId::EOS],
        }
    }
}

impl SamplerParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, ..Self::default() }
    }

    pub fn check(&self) -> Result<(), GenerationError> {
        if self.max_new_tokens == 0 {
            return Err(GenerationError::InvalidParams("max_new_tokens must be at least 1"));
        }
        if let SamplingMode::Temperature(t) = self.mode {
            if !(t.is_finite() && t > 0.0) {
                return Err(GenerationError::InvalidParams("temperature must be positive"));
            }
        }
        if self.top_k == Some(0) {
            return Err(GenerationError::InvalidParams("top_k must be positive"));
        }
        Ok(())
    }

    pub fn rng(&self) -> SamplerRng {
        SamplerRng::seed_from_u64(self.seed)
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub fn sample_token(
    logits: &[f32],
    params: &SamplerParams,
    rng: &mut SamplerRng,
) -> Result<TokenId, GenerationError> {
    if logits.is_empty() {
        return Err(GenerationError::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(GenerationError::NonFiniteLogits);
    }
    let temperature = match params.mode {
        SamplingMode::Greedy => return Ok(TokenId(argmax(logits).expect("non-empty") as u32)),
        SamplingMode::Temperature(t) => t as f64,
    };

    let mut candidates: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = params.top_k {
        if k < candidates.len() {
            // stable sort keeps lower ids first among equal logits
            candidates.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
            candidates.truncate(k);
            candidates.sort_unstable();
        }
    }
    let scaled: Vec<f64> = candidates.iter().map(|&i| logits[i] as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (&id, w) in candidates.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return Ok(TokenId(id as u32));
        }
    }
    // rounding can leave u == total; fall back to the last positive weight
    let last = candidates
        .iter()
        .zip(&weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(&id, _)| id)
        .expect("max weight is 1");
    Ok(TokenId(last as u32))
}

/// Generates up to `max_new_tokens` after `prompt`, stopping before any stop id.
pub fn generate(
    model: &GemmaModel,
    prompt: &[TokenId],
    params: &SamplerParams,
) -> Result<Vec<TokenId>, GenerationError> {
    generate_with(model, prompt, params, |_| true)
}

/// Like [`generate`], calling `on_token` for each emitted token; returning
/// `false` ends generation early.
pub fn generate_with(
    model: &GemmaModel,
    prompt: &[TokenId],
    params: &SamplerParams,
    mut on_token: impl FnMut(TokenId) -> bool,
) -> Result<Vec<TokenId>, GenerationError> {
    params.check()?;
    if prompt.is_empty() {
        return Err(GenerationError::EmptyPrompt);
    }
    let max_context = model.config().max_context;
    if prompt.len() + params.max_new_tokens > max_context {
        return Err(GenerationError::ContextOverflow {
            prompt: prompt.len(),
            new: params.max_new_tokens,
            max_context,
        });
    }
    let mut rng = params.rng();
    let mut cache = model.new_cache();
    let prefill = model.forward(prompt, &mut cache)?;
    let mut logits = prefill.row(prefill.rows() - 1).to_vec();

    let mut out = Vec::with_capacity(params.max_new_tokens);
    loop {
        let tok = sample_token(&logits, params, &mut rng)?;
        if params.stop_ids.contains(&tok) {
            break;
        }
        out.push(tok);
        if out.len() == params.max_new_tokens || !on_token(tok) {
            break;
        }
        logits = model.forward(&[tok], &mut cache)?.into_vec();
    }
    Ok(out)
}
