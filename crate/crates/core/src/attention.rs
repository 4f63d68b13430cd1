//! Grouped key/value attention with causal masking and an incremental cache.
//!
//! Query head `h` reads key/value head `h * n_kv_heads / n_heads`, which covers
//! multi-query attention (`n_kv_heads == 1`) and plain multi-head attention
//! (`n_kv_heads == n_heads`) as the two extremes. Causality is enforced by
//! only ever scoring cached positions `0..=t`; no additive mask is used.

use thiserror::Error;

use crate::config::ModelConfig;
use crate::numerics::{
    dot, matmul, rope_in_place, softmax_in_place, vec_mat, KernelError, Matrix,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("kv cache is full ({capacity} positions)")]
    CacheFull { capacity: usize },
    #[error("non-sequential append: position {position} but cache holds {len} entries")]
    PositionMismatch { position: usize, len: usize },
    #[error("sequence of {len} tokens exceeds the context of {max_context}")]
    ContextOverflow { len: usize, max_context: usize },
    #[error("cache geometry does not match the model config")]
    CacheGeometry,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Projection weights of one attention layer, stored as `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl AttnWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            w_q: Matrix::zeros(cfg.d_model, cfg.q_width()),
            w_k: Matrix::zeros(cfg.d_model, cfg.kv_width()),
            w_v: Matrix::zeros(cfg.d_model, cfg.kv_width()),
            w_o: Matrix::zeros(cfg.q_width(), cfg.d_model),
        }
    }

    pub fn shapes_match(&self, cfg: &ModelConfig) -> bool {
        self.w_q.shape() == [cfg.d_model, cfg.q_width()]
            && self.w_k.shape() == [cfg.d_model, cfg.kv_width()]
            && self.w_v.shape() == [cfg.d_model, cfg.kv_width()]
            && self.w_o.shape() == [cfg.q_width(), cfg.d_model]
    }
}

/// Append-only key/value history for one layer.
///
/// Storage is head-major, `[n_kv_heads × capacity × head_size]`, so the
/// history of one key/value head is a single contiguous slab.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<f32>,
    values: Vec<f32>,
    n_kv_heads: usize,
    head_size: usize,
    capacity: usize,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let size = cfg.n_kv_heads * cfg.max_context * cfg.head_size;
        Self {
            keys: vec![0.0; size],
            values: vec![0.0; size],
            n_kv_heads: cfg.n_kv_heads,
            head_size: cfg.head_size,
            capacity: cfg.max_context,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }

    fn fits(&self, cfg: &ModelConfig) -> bool {
        self.n_kv_heads == cfg.n_kv_heads
            && self.head_size == cfg.head_size
            && self.capacity == cfg.max_context
    }

    /// Cached keys of one kv head, `len × head_size`.
    pub fn key_slab(&self, kv_head: usize) -> &[f32] {
        let start = kv_head * self.capacity * self.head_size;
        &self.keys[start..start + self.len * self.head_size]
    }

    pub fn value_slab(&self, kv_head: usize) -> &[f32] {
        let start = kv_head * self.capacity * self.head_size;
        &self.values[start..start + self.len * self.head_size]
    }

    /// Appends one position; `k` and `v` are `n_kv_heads × head_size`.
    pub fn append(&mut self, position: usize, k: &[f32], v: &[f32]) -> Result<(), AttentionError> {
        if self.len == self.capacity {
            return Err(AttentionError::CacheFull { capacity: self.capacity });
        }
        if position != self.len {
            return Err(AttentionError::PositionMismatch { position, len: self.len });
        }
        let hs = self.head_size;
        for g in 0..self.n_kv_heads {
            let dst = (g * self.capacity + position) * hs;
            self.keys[dst..dst + hs].copy_from_slice(&k[g * hs..(g + 1) * hs]);
            self.values[dst..dst + hs].copy_from_slice(&v[g * hs..(g + 1) * hs]);
        }
        self.len += 1;
        Ok(())
    }
}

/// Query, key and value for one token after projection and rotary embedding.
struct Projected {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

fn project(
    x: &[f32],
    position: usize,
    weights: &AttnWeights,
    cfg: &ModelConfig,
) -> Result<Projected, AttentionError> {
    let mut q = vec_mat(x, &weights.w_q)?;
    let mut k = vec_mat(x, &weights.w_k)?;
    let v = vec_mat(x, &weights.w_v)?;
    rope_heads(&mut q, position, cfg)?;
    rope_heads(&mut k, position, cfg)?;
    Ok(Projected { q, k, v })
}

/// Attention probabilities of query head `head` over every cached position.
pub fn head_probabilities(
    q_head: &[f32],
    head: usize,
    cache: &KvCache,
    cfg: &ModelConfig,
) -> Result<Vec<f32>, AttentionError> {
    prefix_probabilities(q_head, head, cache, cache.len(), cfg)
}

// Scores only the first `upto` cached positions.
fn prefix_probabilities(
    q_head: &[f32],
    head: usize,
    cache: &KvCache,
    upto: usize,
    cfg: &ModelConfig,
) -> Result<Vec<f32>, AttentionError> {
    let scale = cfg.query_scale();
    let keys = &cache.key_slab(cfg.kv_group(head))[..upto * cfg.head_size];
    let mut scores: Vec<f32> = keys
        .chunks_exact(cfg.head_size)
        .map(|key| dot(q_head, key) * scale)
        .collect();
    softmax_in_place(&mut scores)?;
    Ok(scores)
}

// Weighted value sums for every query head over positions `0..upto`, concatenated.
fn mix_heads(
    q: &[f32],
    cache: &KvCache,
    upto: usize,
    cfg: &ModelConfig,
    out: &mut [f32],
) -> Result<(), AttentionError> {
    let hs = cfg.head_size;
    out.fill(0.0);
    for (head, q_head) in q.chunks_exact(hs).enumerate() {
        let probs = prefix_probabilities(q_head, head, cache, upto, cfg)?;
        let values = cache.value_slab(cfg.kv_group(head));
        let dst = &mut out[head * hs..(head + 1) * hs];
        for (p, value) in probs.iter().zip(values.chunks_exact(hs)) {
            for (o, v) in dst.iter_mut().zip(value) {
                *o += p * v;
            }
        }
    }
    Ok(())
}

fn rope_heads(m: &mut [f32], position: usize, cfg: &ModelConfig) -> Result<(), KernelError> {
    for head in m.chunks_exact_mut(cfg.head_size) {
        rope_in_place(head, position, cfg.rope_base)?;
    }
    Ok(())
}

/// Single-token attention at `position`, appending its key/value to `cache`.
pub fn attend(
    x: &[f32],
    position: usize,
    weights: &AttnWeights,
    cache: &mut KvCache,
    cfg: &ModelConfig,
) -> Result<Vec<f32>, AttentionError> {
    if !cache.fits(cfg) {
        return Err(AttentionError::CacheGeometry);
    }
    if position >= cfg.max_context {
        return Err(AttentionError::ContextOverflow {
            len: position + 1,
            max_context: cfg.max_context,
        });
    }
    if position != cache.len() {
        return Err(AttentionError::PositionMismatch { position, len: cache.len() });
    }
    let Projected { q, k, v } = project(x, position, weights, cfg)?;
    cache.append(position, &k, &v)?;
    let mut heads = vec![0.0; cfg.q_width()];
    mix_heads(&q, cache, cache.len(), cfg, &mut heads)?;
    Ok(vec_mat(&heads, &weights.w_o)?)
}

/// Runs a block of consecutive tokens starting at `cache.len()`.
///
/// Projections are computed for the whole block at once; every row then
/// attends over the cached prefix ending at its own position.
pub fn attend_seq(
    x_seq: &Matrix,
    weights: &AttnWeights,
    cache: &mut KvCache,
    cfg: &ModelConfig,
) -> Result<Matrix, AttentionError> {
    if !cache.fits(cfg) {
        return Err(AttentionError::CacheGeometry);
    }
    let start = cache.len();
    let t_len = x_seq.rows();
    if start + t_len > cfg.max_context {
        return Err(AttentionError::ContextOverflow {
            len: start + t_len,
            max_context: cfg.max_context,
        });
    }
    let mut q = matmul(x_seq, &weights.w_q)?;
    let mut k = matmul(x_seq, &weights.w_k)?;
    let v = matmul(x_seq, &weights.w_v)?;
    for t in 0..t_len {
        rope_heads(q.row_mut(t), start + t, cfg)?;
        rope_heads(k.row_mut(t), start + t, cfg)?;
        cache.append(start + t, k.row(t), v.row(t))?;
    }
    let mut heads = Matrix::zeros(t_len, cfg.q_width());
    for t in 0..t_len {
        mix_heads(q.row(t), cache, start + t + 1, cfg, heads.row_mut(t))?;
    }
    Ok(matmul(&heads, &weights.w_o)?)
}

/// Full-sequence causal attention with no prior history (prefill).
pub fn attend_batch(
    x_seq: &Matrix,
    weights: &AttnWeights,
    cfg: &ModelConfig,
) -> Result<Matrix, AttentionError> {
    if x_seq.rows() > cfg.max_context {
        return Err(AttentionError::ContextOverflow {
            len: x_seq.rows(),
            max_context: cfg.max_context,
        });
    }
    let mut cache = KvCache::new(cfg);
    attend_seq(x_seq, weights, &mut cache, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-0.3..0.3)).collect())
            .unwrap()
    }

    fn random_weights(cfg: &ModelConfig, seed: u64) -> AttnWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttnWeights {
            w_q: random_matrix(&mut rng, cfg.d_model, cfg.q_width()),
            w_k: random_matrix(&mut rng, cfg.d_model, cfg.kv_width()),
            w_v: random_matrix(&mut rng, cfg.d_model, cfg.kv_width()),
            w_o: random_matrix(&mut rng, cfg.q_width(), cfg.d_model),
        }
    }

    #[test]
    fn first_token_output_is_value_projection() {
        let cfg = Preset::Nano.config();
        let w = random_weights(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f32> = (0..cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cache = KvCache::new(&cfg);
        let y = attend(&x, 0, &w, &mut cache, &cfg).unwrap();

        let v = vec_mat(&x, &w.w_v).unwrap();
        let mut heads = Vec::new();
        for h in 0..cfg.n_heads {
            let g = cfg.kv_group(h);
            heads.extend_from_slice(&v[g * cfg.head_size..(g + 1) * cfg.head_size]);
        }
        assert_eq!(y, vec_mat(&heads, &w.w_o).unwrap());
    }

    #[test]
    fn rejects_out_of_order_append() {
        let cfg = Preset::Nano.config();
        let w = random_weights(&cfg, 3);
        let mut cache = KvCache::new(&cfg);
        let x = vec![0.1; cfg.d_model];
        assert_eq!(
            attend(&x, 1, &w, &mut cache, &cfg),
            Err(AttentionError::PositionMismatch { position: 1, len: 0 })
        );
        attend(&x, 0, &w, &mut cache, &cfg).unwrap();
        assert!(attend(&x, 0, &w, &mut cache, &cfg).is_err());
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn cache_full_and_context_overflow() {
        let mut cfg = Preset::Nano.config();
        cfg.max_context = 2;
        let w = random_weights(&cfg, 4);
        let mut cache = KvCache::new(&cfg);
        let x = vec![0.1; cfg.d_model];
        attend(&x, 0, &w, &mut cache, &cfg).unwrap();
        attend(&x, 1, &w, &mut cache, &cfg).unwrap();
        assert!(matches!(
            attend(&x, 2, &w, &mut cache, &cfg),
            Err(AttentionError::ContextOverflow { .. })
        ));
        let kv = vec![0.0; cfg.kv_width()];
        assert_eq!(
            cache.append(2, &kv, &kv),
            Err(AttentionError::CacheFull { capacity: 2 })
        );
        let seq = Matrix::zeros(3, cfg.d_model);
        assert!(matches!(
            attend_batch(&seq, &w, &cfg),
            Err(AttentionError::ContextOverflow { len: 3, .. })
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = Preset::Nano.config();
        let w = random_weights(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cache = KvCache::new(&cfg);
        for pos in 0..10 {
            let x: Vec<f32> = (0..cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
            attend(&x, pos, &w, &mut cache, &cfg).unwrap();
            let q: Vec<f32> = (0..cfg.head_size).map(|_| rng.random_range(-1.0..1.0)).collect();
            for h in 0..cfg.n_heads {
                let p = head_probabilities(&q, h, &cache, &cfg).unwrap();
                assert_eq!(p.len(), pos + 1);
                let sum: f32 = p.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn multi_query_heads_share_one_slab() {
        let cfg = Preset::Nano.config();
        assert_eq!(cfg.n_kv_heads, 1);
        let w = random_weights(&cfg, 7);
        let mut cache = KvCache::new(&cfg);
        for pos in 0..4 {
            attend(&vec![0.2; cfg.d_model], pos, &w, &mut cache, &cfg).unwrap();
        }
        let first = cache.key_slab(cfg.kv_group(0));
        for h in 1..cfg.n_heads {
            assert!(std::ptr::eq(first, cache.key_slab(cfg.kv_group(h))));
            assert!(std::ptr::eq(
                cache.value_slab(cfg.kv_group(0)),
                cache.value_slab(cfg.kv_group(h))
            ));
        }
    }
}
