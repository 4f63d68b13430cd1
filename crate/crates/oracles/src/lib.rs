//! Independent reference implementations used as test oracles.
//!
//! Everything here is written as plain scalar loops in f64 and reads model
//! weights straight from their public fields. Nothing calls back into the
//! kernels, attention or model code paths under test.

#![allow(clippy::needless_range_loop)]

use gemma_core::attention::AttnWeights;
use gemma_core::config::{GeluVariant, ModelConfig};
use gemma_core::model::GemmaModel;
use gemma_core::numerics::Matrix;
use gemma_core::text::TokenId;

fn w(m: &Matrix, r: usize, c: usize) -> f64 {
    m.data()[r * m.cols() + c] as f64
}

/// `x · m` for a row vector, scalar loops.
pub fn row_times(x: &[f64], m: &Matrix) -> Vec<f64> {
    assert_eq!(x.len(), m.rows());
    (0..m.cols())
        .map(|c| (0..m.rows()).map(|r| x[r] * w(m, r, c)).sum())
        .collect()
}

pub fn rms_norm(x: &[f64], gain: &[f32], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, &g)| g as f64 * v / denom).collect()
}

pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Error function by composite Simpson integration of the Gaussian.
pub fn erf(x: f64) -> f64 {
    let n = 2000;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        let t = i as f64 * h;
        s += if i % 2 == 1 { 4.0 * f(t) } else { 2.0 * f(t) };
    }
    2.0 / std::f64::consts::PI.sqrt() * s * h / 3.0
}

pub fn gelu(x: f64, variant: GeluVariant) -> f64 {
    match variant {
        GeluVariant::Tanh => gelu_tanh(x),
        GeluVariant::Erf => 0.5 * x * (1.0 + erf(x / 2f64.sqrt())),
    }
}

/// Rotates pair `(2i, 2i+1)` by `pos * base^(-2i/d)` via an explicit 2×2 matrix.
pub fn rope(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let theta = 1.0 / base.powf((2 * i) as f64 / d as f64);
        let a = pos as f64 * theta;
        let rot = [[a.cos(), -a.sin()], [a.sin(), a.cos()]];
        out[2 * i] = rot[0][0] * v[2 * i] + rot[0][1] * v[2 * i + 1];
        out[2 * i + 1] = rot[1][0] * v[2 * i] + rot[1][1] * v[2 * i + 1];
    }
    out
}

/// Scalar GeGLU feedforward.
pub fn geglu(x: &[f64], gate: &Matrix, up: &Matrix, down: &Matrix, variant: GeluVariant) -> Vec<f64> {
    let h = gate.cols();
    let mut hidden = vec![0.0; h];
    for j in 0..h {
        let mut g = 0.0;
        let mut u = 0.0;
        for (i, xi) in x.iter().enumerate() {
            g += xi * w(gate, i, j);
            u += xi * w(up, i, j);
        }
        hidden[j] = gelu(g, variant) * u;
    }
    row_times(&hidden, down)
}

/// Causal grouped attention over a whole sequence, recomputed from scratch.
/// Head `h` reads kv head `floor(h / (n_heads / n_kv_heads))`.
pub fn causal_attention(x_seq: &[Vec<f64>], wts: &AttnWeights, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    let hs = cfg.head_size;
    let per_group = cfg.n_heads / cfg.n_kv_heads;
    let t_len = x_seq.len();
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for (t, x) in x_seq.iter().enumerate() {
        let q = row_times(x, &wts.w_q);
        let k = row_times(x, &wts.w_k);
        qs.push(q.chunks(hs).map(|h| rope(h, t, cfg.rope_base)).collect::<Vec<_>>());
        ks.push(k.chunks(hs).map(|h| rope(h, t, cfg.rope_base)).collect::<Vec<_>>());
        vs.push(row_times(x, &wts.w_v).chunks(hs).map(<[f64]>::to_vec).collect::<Vec<_>>());
    }
    let scale = 1.0 / (hs as f64).sqrt();
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut concat = Vec::with_capacity(cfg.n_heads * hs);
        for h in 0..cfg.n_heads {
            let g = h / per_group;
            let scores: Vec<f64> = (0..=t)
                .map(|s| (0..hs).map(|i| qs[t][h][i] * ks[s][g][i]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for i in 0..hs {
                concat.push((0..=t).map(|s| e[s] / z * vs[s][g][i]).sum());
            }
        }
        out.push(row_times(&concat, &wts.w_o));
    }
    out
}

/// Textbook multi-head attention: every head has its own key and value
/// projection columns. Only meaningful when `n_kv_heads == n_heads`.
pub fn plain_mha(x_seq: &[Vec<f64>], wts: &AttnWeights, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    assert_eq!(cfg.n_kv_heads, cfg.n_heads);
    let hs = cfg.head_size;
    let scale = 1.0 / (hs as f64).sqrt();
    let t_len = x_seq.len();
    let mut heads_out = vec![vec![0.0; cfg.n_heads * hs]; t_len];
    for h in 0..cfg.n_heads {
        let cols = h * hs..(h + 1) * hs;
        let proj = |x: &[f64], m: &Matrix, pos: usize| -> Vec<f64> {
            let full: Vec<f64> = cols
                .clone()
                .map(|c| (0..m.rows()).map(|r| x[r] * w(m, r, c)).sum())
                .collect();
            rope(&full, pos, cfg.rope_base)
        };
        let q: Vec<Vec<f64>> = x_seq.iter().enumerate().map(|(t, x)| proj(x, &wts.w_q, t)).collect();
        let k: Vec<Vec<f64>> = x_seq.iter().enumerate().map(|(t, x)| proj(x, &wts.w_k, t)).collect();
        let v: Vec<Vec<f64>> = x_seq
            .iter()
            .map(|x| cols.clone().map(|c| (0..wts.w_v.rows()).map(|r| x[r] * w(&wts.w_v, r, c)).sum()).collect())
            .collect();
        for t in 0..t_len {
            let logits: Vec<f64> = (0..=t)
                .map(|s| q[t].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for i in 0..hs {
                heads_out[t][h * hs + i] = (0..=t).map(|s| e[s] / z * v[s][i]).sum();
            }
        }
    }
    heads_out.iter().map(|c| row_times(c, &wts.w_o)).collect()
}

/// Straight-line forward pass: logits for every position of `tokens`.
pub fn reference_logits(model: &GemmaModel, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let d = cfg.d_model;
    let eps = cfg.norm_eps as f64;
    let scale = if cfg.embed_scale { (d as f64).sqrt() } else { 1.0 };

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| (0..d).map(|c| w(&model.embedding, t.index(), c) * scale).collect())
        .collect();

    for block in &model.blocks {
        let normed: Vec<Vec<f64>> = x.iter().map(|r| rms_norm(r, &block.attn_norm, eps)).collect();
        let attn = causal_attention(&normed, &block.attn, cfg);
        for (r, a) in x.iter_mut().zip(&attn) {
            for (v, av) in r.iter_mut().zip(a) {
                *v += av;
            }
        }
        for r in x.iter_mut() {
            let n = rms_norm(r, &block.ffn_norm, eps);
            let f = geglu(&n, &block.w_gate, &block.w_up, &block.w_down, cfg.gelu);
            for (v, fv) in r.iter_mut().zip(&f) {
                *v += fv;
            }
        }
    }

    x.iter()
        .map(|r| {
            let h = rms_norm(r, &model.final_norm, eps);
            (0..cfg.vocab_size)
                .map(|v| (0..d).map(|c| h[c] * w(&model.embedding, v, c)).sum())
                .collect()
        })
        .collect()
}

/// Element count obtained by walking every field of the model.
pub fn allocated_params(model: &GemmaModel) -> u64 {
    let mut n = model.embedding.data().len() + model.final_norm.len();
    for b in &model.blocks {
        n += b.attn_norm.len() + b.ffn_norm.len();
        n += b.attn.w_q.data().len() + b.attn.w_k.data().len();
        n += b.attn.w_v.data().len() + b.attn.w_o.data().len();
        n += b.w_gate.data().len() + b.w_up.data().len() + b.w_down.data().len();
    }
    n as u64
}

/// Greedy decoding that recomputes the whole sequence with a fresh cache at
/// every step. Returns the tokens and the logits used at each step.
pub fn greedy_no_cache(model: &GemmaModel, prompt: &[TokenId], steps: usize) -> (Vec<TokenId>, Vec<Vec<f32>>) {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let mut step_logits = Vec::new();
    for _ in 0..steps {
        let mut cache = model.new_cache();
        let logits = model.forward(&seq, &mut cache).expect("forward");
        let last = logits.row(logits.rows() - 1).to_vec();
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        step_logits.push(last);
        let tok = TokenId(best as u32);
        out.push(tok);
        seq.push(tok);
    }
    (out, step_logits)
}

/// Levenshtein distance by memoised recursion on suffixes.
pub fn levenshtein_recursive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

/// Wilson score interval written directly from its textbook form.
pub fn wilson(p: f64, n: f64, z: f64) -> (f64, f64) {
    let denom = 1.0 + z * z / n;
    let centre = p + z * z / (2.0 * n);
    let spread = z * ((p * (1.0 - p) + z * z / (4.0 * n)) / n).sqrt();
    ((centre - spread) / denom, (centre + spread) / denom)
}

/// Max absolute difference between an f32 matrix and f64 rows.
pub fn max_abs_diff(m: &Matrix, rows: &[Vec<f64>]) -> f64 {
    assert_eq!(m.rows(), rows.len());
    let mut worst = 0.0f64;
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            worst = worst.max((m.get(r, c) as f64 - v).abs());
        }
    }
    worst
}

pub mod fixtures {
    //! Seeded generators and scripted continuation models.

    use std::collections::HashMap;

    use gemma_core::evals::{Continuation, CorpusDoc, EvalError};
    use gemma_core::text::{TokenId, Vocab};
    use rand::Rng;

    const WORDS: [&str; 24] = [
        "the", "river", "stone", "quiet", "market", "lantern", "north", "paper", "silver", "window",
        "garden", "eleven", "harbor", "winter", "copper", "field", "signal", "orchard", "bridge",
        "amber", "valley", "thread", "candle", "meadow",
    ];

    /// Random string mixing ASCII, digits, control-token lookalikes and
    /// arbitrary scalar values from every plane.
    pub fn random_text(rng: &mut impl Rng, max_chars: usize) -> String {
        let n = rng.random_range(0..=max_chars);
        let mut s = String::new();
        for _ in 0..n {
            match rng.random_range(0..10) {
                0..=3 => s.push(rng.random_range(' '..='~')),
                4 => s.push(char::from(b'0' + rng.random_range(0..10u8))),
                5 => s.push_str(["<start_of_turn>", "<end_of_turn>", "<bos>", "<eos>", "<pad>", "<0x41>", "\n"][rng.random_range(0..7)]),
                6 => s.push(rng.random_range('\u{80}'..='\u{7ff}')),
                _ => s.push(rng.random::<char>()),
            }
        }
        s
    }

    /// Space-separated lowercase words; never contains `~`.
    pub fn word_doc(rng: &mut impl Rng, words: usize) -> String {
        (0..words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    }

    pub fn word_corpus(rng: &mut impl Rng, docs: usize, words: usize) -> Vec<CorpusDoc> {
        (0..docs)
            .map(|i| CorpusDoc {
                id: format!("doc-{i}"),
                text: word_doc(rng, words),
                category: Some(["web", "code", "science"][i % 3].to_string()),
            })
            .collect()
    }

    /// Replaces `round(frac * len)` evenly spaced characters with `~`.
    /// For text without `~` the character edit distance is exactly that count.
    pub fn perturb(text: &str, frac: f64) -> String {
        let chars: Vec<char> = text.chars().collect();
        let k = (frac * chars.len() as f64).round() as usize;
        let mut out = chars.clone();
        for j in 0..k {
            out[j * chars.len() / k] = '~';
        }
        out.into_iter().collect()
    }

    /// Continues each known prompt with its true continuation, optionally
    /// perturbed at the character level.
    pub struct ReplayModel {
        vocab: Vocab,
        table: HashMap<Vec<TokenId>, Vec<TokenId>>,
        perturb_frac: f64,
        max_context: usize,
    }

    impl ReplayModel {
        pub fn new(vocab: &Vocab, corpus: &[CorpusDoc], prompt_len: usize, cont_len: usize, perturb_frac: f64) -> Self {
            let mut table = HashMap::new();
            for d in corpus {
                let t = vocab.encode(&d.text);
                if t.len() >= prompt_len + cont_len {
                    table.insert(t[..prompt_len].to_vec(), t[prompt_len..prompt_len + cont_len].to_vec());
                }
            }
            Self { vocab: vocab.clone(), table, perturb_frac, max_context: 8192 }
        }
    }

    impl Continuation for ReplayModel {
        fn max_context(&self) -> usize {
            self.max_context
        }

        fn continue_greedy(&self, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>, EvalError> {
            let truth = self.table.get(prompt).expect("prompt comes from the corpus");
            assert_eq!(truth.len(), n);
            if self.perturb_frac == 0.0 {
                return Ok(truth.clone());
            }
            let text = perturb(&self.vocab.decode(truth)?, self.perturb_frac);
            Ok(self.vocab.encode(&text))
        }
    }

    /// Always emits the same token.
    pub struct ConstantModel(pub TokenId);

    impl Continuation for ConstantModel {
        fn max_context(&self) -> usize {
            8192
        }

        fn continue_greedy(&self, _prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>, EvalError> {
            Ok(vec![self.0; n])
        }
    }
}
