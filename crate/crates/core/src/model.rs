//! The decoder stack: tied token embedding, pre-norm blocks, final norm and
//! logits through the transposed embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{attend_seq, AttentionError, AttnWeights, KvCache};
use crate::config::{ConfigError, GeluVariant, ModelConfig};
use crate::numerics::{dot, gelu_erf, gelu_tanh, geglu_ffn, rms_norm, KernelError, Matrix};
use crate::text::TokenId;

/// Standard deviation of the normal distribution used by [`GemmaModel::random_init`].
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("{len} positions exceed the context of {max_context}")]
    ContextOverflow { len: usize, max_context: usize },
    #[error("cache set has {found} layers, model has {expected}")]
    CacheLayers { expected: usize, found: usize },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// One pre-norm decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f32>,
    pub attn: AttnWeights,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl Block {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            attn_norm: vec![0.0; cfg.d_model],
            attn: AttnWeights::zeros(cfg),
            ffn_norm: vec![0.0; cfg.d_model],
            w_gate: Matrix::zeros(cfg.d_model, cfg.ffn_branch()),
            w_up: Matrix::zeros(cfg.d_model, cfg.ffn_branch()),
            w_down: Matrix::zeros(cfg.ffn_branch(), cfg.d_model),
        }
    }

    /// `x + attn(norm(x))`, then `h + ffn(norm(h))`, row by row.
    pub fn apply(
        &self,
        x_seq: &Matrix,
        cache: &mut KvCache,
        cfg: &ModelConfig,
    ) -> Result<Matrix, ModelError> {
        let mut normed = Matrix::zeros(x_seq.rows(), cfg.d_model);
        for t in 0..x_seq.rows() {
            normed
                .row_mut(t)
                .copy_from_slice(&rms_norm(x_seq.row(t), &self.attn_norm, cfg.norm_eps)?);
        }
        let attn_out = attend_seq(&normed, &self.attn, cache, cfg)?;

        let gelu = gelu_fn(cfg.gelu);
        let mut out = x_seq.clone();
        for t in 0..x_seq.rows() {
            let row = out.row_mut(t);
            for (h, a) in row.iter_mut().zip(attn_out.row(t)) {
                *h += a;
            }
            let n = rms_norm(row, &self.ffn_norm, cfg.norm_eps)?;
            let f = geglu_ffn(&n, &self.w_gate, &self.w_up, &self.w_down, gelu)?;
            for (h, v) in row.iter_mut().zip(&f) {
                *h += v;
            }
        }
        Ok(out)
    }
}

pub fn gelu_fn(variant: GeluVariant) -> fn(f32) -> f32 {
    match variant {
        GeluVariant::Tanh => gelu_tanh,
        GeluVariant::Erf => gelu_erf,
    }
}

/// Per-layer key/value caches for one generation session.
#[derive(Debug, Clone)]
pub struct SessionCache {
    layers: Vec<KvCache>,
}

impl SessionCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { layers: (0..cfg.n_layers).map(|_| KvCache::new(cfg)).collect() }
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, KvCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, i: usize) -> &KvCache {
        &self.layers[i]
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(KvCache::clear);
    }
}

/// Borrowed view of one named tensor.
#[derive(Debug, Clone)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// Name and shape of every tensor a model with this config owns, in
/// canonical order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![("embedding".to_string(), vec![cfg.vocab_size, d])];
    for i in 0..cfg.n_layers {
        let p = format!("blocks.{i}");
        out.push((format!("{p}.attn_norm"), vec![d]));
        out.push((format!("{p}.attn.w_q"), vec![d, cfg.q_width()]));
        out.push((format!("{p}.attn.w_k"), vec![d, cfg.kv_width()]));
        out.push((format!("{p}.attn.w_v"), vec![d, cfg.kv_width()]));
        out.push((format!("{p}.attn.w_o"), vec![cfg.q_width(), d]));
        out.push((format!("{p}.ffn_norm"), vec![d]));
        out.push((format!("{p}.ffn.w_gate"), vec![d, cfg.ffn_branch()]));
        out.push((format!("{p}.ffn.w_up"), vec![d, cfg.ffn_branch()]));
        out.push((format!("{p}.ffn.w_down"), vec![cfg.ffn_branch(), d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GemmaModel {
    cfg: ModelConfig,
    /// `vocab_size × d_model`; also the output projection.
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f32>,
}

impl GemmaModel {
    /// All weights zero, all norm gains zero.
    pub fn zeros(cfg: ModelConfig) -> Result<Self, ModelError> {
        let cfg = cfg.validate()?;
        Ok(Self {
            embedding: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            blocks: (0..cfg.n_layers).map(|_| Block::zeros(&cfg)).collect(),
            final_norm: vec![0.0; cfg.d_model],
            cfg,
        })
    }

    /// Deterministic initialisation: ChaCha8 seeded with `seed` drives
    /// `Normal(0, 0.02)` draws for every matrix, filled in canonical tensor
    /// order and row-major within each tensor. Norm gains are set to 1.
    pub fn random_init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        model.for_each_tensor_mut(|name, data| {
            if name.ends_with("norm") {
                data.fill(1.0);
            } else {
                data.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            }
        });
        Ok(model)
    }

    /// Builds a model from named tensors; the set and every shape must match
    /// [`tensor_layout`] exactly.
    pub fn from_tensors<I>(cfg: ModelConfig, tensors: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>,
    {
        let mut model = Self::zeros(cfg)?;
        let layout = tensor_layout(&model.cfg);
        let mut supplied: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
            std::collections::HashMap::new();
        for (name, shape, data) in tensors {
            if !layout.iter().any(|(n, _)| *n == name) {
                return Err(ModelError::UnexpectedTensor(name));
            }
            supplied.insert(name, (shape, data));
        }
        for (name, expected) in &layout {
            let (shape, data) = supplied
                .get(name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            let numel: usize = expected.iter().product();
            if shape != expected || data.len() != numel {
                return Err(ModelError::TensorShape {
                    name: name.clone(),
                    expected: expected.clone(),
                    found: shape.clone(),
                });
            }
        }
        model.for_each_tensor_mut(|name, dst| {
            dst.copy_from_slice(&supplied[name].1);
        });
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let layout = tensor_layout(&self.cfg);
        let mut data: Vec<&[f32]> = vec![self.embedding.data()];
        for b in &self.blocks {
            data.extend([
                b.attn_norm.as_slice(),
                b.attn.w_q.data(),
                b.attn.w_k.data(),
                b.attn.w_v.data(),
                b.attn.w_o.data(),
                b.ffn_norm.as_slice(),
                b.w_gate.data(),
                b.w_up.data(),
                b.w_down.data(),
            ]);
        }
        data.push(&self.final_norm);
        layout
            .into_iter()
            .zip(data)
            .map(|((name, shape), data)| TensorView { name, shape, data })
            .collect()
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        f("embedding", self.embedding.data_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            f(&format!("{p}.attn_norm"), &mut b.attn_norm);
            f(&format!("{p}.attn.w_q"), b.attn.w_q.data_mut());
            f(&format!("{p}.attn.w_k"), b.attn.w_k.data_mut());
            f(&format!("{p}.attn.w_v"), b.attn.w_v.data_mut());
            f(&format!("{p}.attn.w_o"), b.attn.w_o.data_mut());
            f(&format!("{p}.ffn_norm"), &mut b.ffn_norm);
            f(&format!("{p}.ffn.w_gate"), b.w_gate.data_mut());
            f(&format!("{p}.ffn.w_up"), b.w_up.data_mut());
            f(&format!("{p}.ffn.w_down"), b.w_down.data_mut());
        }
        f("final_norm", &mut self.final_norm);
    }

    /// Total number of allocated parameters.
    pub fn num_params(&self) -> u64 {
        self.tensors().iter().map(|t| t.data.len() as u64).sum()
    }

    /// SHA-256 over the little-endian bytes of every tensor in canonical order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            for v in t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn new_cache(&self) -> SessionCache {
        SessionCache::new(&self.cfg)
    }

    /// Embedding rows for `tokens`, scaled by `sqrt(d_model)` when enabled.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Matrix, ModelError> {
        let d = self.cfg.d_model;
        let scale = if self.cfg.embed_scale { (d as f32).sqrt() } else { 1.0 };
        let mut x = Matrix::zeros(tokens.len(), d);
        for (t, tok) in tokens.iter().enumerate() {
            let id = tok.index();
            if id >= self.cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange { id: tok.0, vocab_size: self.cfg.vocab_size });
            }
            for (dst, &e) in x.row_mut(t).iter_mut().zip(self.embedding.row(id)) {
                *dst = e * scale;
            }
        }
        Ok(x)
    }

    /// Final normalised hidden states for `tokens`, continuing from `cache`.
    pub fn forward_hidden(
        &self,
        tokens: &[TokenId],
        cache: &mut SessionCache,
    ) -> Result<Matrix, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if cache.layers.len() != self.cfg.n_layers {
            return Err(ModelError::CacheLayers {
                expected: self.cfg.n_layers,
                found: cache.layers.len(),
            });
        }
        let end = cache.len() + tokens.len();
        if end > self.cfg.max_context {
            return Err(ModelError::ContextOverflow { len: end, max_context: self.cfg.max_context });
        }
        let mut x = self.embed(tokens)?;
        for (block, layer_cache) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            x = block.apply(&x, layer_cache, &self.cfg)?;
        }
        for t in 0..x.rows() {
            let n = rms_norm(x.row(t), &self.final_norm, self.cfg.norm_eps)?;
            x.row_mut(t).copy_from_slice(&n);
        }
        Ok(x)
    }

    /// Logits `T × vocab_size`, computed against the tied embedding.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        cache: &mut SessionCache,
    ) -> Result<Matrix, ModelError> {
        let hidden = self.forward_hidden(tokens, cache)?;
        let mut logits = Matrix::zeros(hidden.rows(), self.cfg.vocab_size);
        for t in 0..hidden.rows() {
            let h = hidden.row(t);
            for (v, out) in logits.row_mut(t).iter_mut().enumerate() {
                *out = dot(h, self.embedding.row(v));
            }
        }
        Ok(logits)
    }
}
