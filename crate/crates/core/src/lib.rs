//! Desk-scale implementation of the Gemma decoder-only transformer together
//! with its memorization and pairwise-preference evaluation procedures.
//!
//! Modules, bottom-up:
//!
//! * [`config`]: hyperparameters, presets and closed-form parameter counts
//! * [`numerics`]: f32 kernels (matmul, softmax, RMSNorm, GeGLU, RoPE)
//! * [`attention`]: grouped key/value attention with a KV cache
//! * [`model`]: the tied-embedding decoder stack
//! * [`text`]: byte-fallback tokenizer and dialogue formatter
//! * [`generation`]: greedy and temperature decoding
//! * [`evals`]: memorization audit and win-rate statistics
//! * [`checkpoint`]: the `GMMF` single-file weight format

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod evals;
pub mod generation;
pub mod model;
pub mod numerics;
pub mod text;

pub use config::{count_params, preset, ModelConfig, ParamCounts, Preset};
pub use model::{GemmaModel, SessionCache};
pub use text::{TokenId, Turn, Vocab};
