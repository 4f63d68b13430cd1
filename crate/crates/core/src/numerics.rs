//! Dense f32 kernels: matrix products, softmax, RMSNorm, GELU gates, GeGLU and
//! rotary position embedding.
//!
//! Every kernel accumulates in f32 in a fixed index order, so identical inputs
//! produce bit-identical outputs. Row-vector times matrix (`vec_mat`) and
//! `matmul` share the same accumulation order, which makes a batched prefill
//! agree exactly with token-by-token decoding.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} received an empty input")]
    Empty { op: &'static str },
    #[error("{op} produced or received a non-finite value")]
    NonFinite { op: &'static str },
    #[error("rotary embedding needs an even head size, got {0}")]
    OddRotaryDim(usize),
}

fn shape_err(op: &'static str, detail: String) -> KernelError {
    KernelError::Shape { op, detail }
}

fn ensure_finite(op: &'static str, xs: &[f32]) -> Result<(), KernelError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(KernelError::NonFinite { op })
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "matrix",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, KernelError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("matrix", "ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, KernelError> {
    if a.cols != b.rows {
        return Err(shape_err(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        accumulate_row(a.row(r), b, out.row_mut(r));
    }
    ensure_finite("matmul", &out.data)?;
    Ok(out)
}

/// Row vector times matrix: `x · w`.
pub fn vec_mat(x: &[f32], w: &Matrix) -> Result<Vec<f32>, KernelError> {
    if x.len() != w.rows {
        return Err(shape_err(
            "vec_mat",
            format!("vector of length {} times {}x{}", x.len(), w.rows, w.cols),
        ));
    }
    let mut out = vec![0.0; w.cols];
    accumulate_row(x, w, &mut out);
    ensure_finite("vec_mat", &out)?;
    Ok(out)
}

// out[j] = sum_k x[k] * w[k, j], summed in ascending k.
fn accumulate_row(x: &[f32], w: &Matrix, out: &mut [f32]) {
    for (k, &xk) in x.iter().enumerate() {
        let wrow = w.row(k);
        for (o, &wkj) in out.iter_mut().zip(wrow) {
            *o += xk * wkj;
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(scores: &[f32]) -> Result<Vec<f32>, KernelError> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(xs: &mut [f32]) -> Result<(), KernelError> {
    if xs.is_empty() {
        return Err(KernelError::Empty { op: "softmax" });
    }
    ensure_finite("softmax", xs)?;
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
    ensure_finite("softmax", xs)
}

/// `gamma_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f32], gamma: &[f32], eps: f32) -> Result<Vec<f32>, KernelError> {
    if x.len() != gamma.len() {
        return Err(shape_err(
            "rms_norm",
            format!("input length {} vs gain length {}", x.len(), gamma.len()),
        ));
    }
    if x.is_empty() {
        return Err(KernelError::Empty { op: "rms_norm" });
    }
    let mean_sq = x.iter().fold(0.0f32, |acc, v| acc + v * v) / x.len() as f32;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    let out: Vec<f32> = x.iter().zip(gamma).map(|(v, g)| g * (v * inv)).collect();
    ensure_finite("rms_norm", &out)?;
    Ok(out)
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_tanh(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu_erf(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2))
}

/// Gated feedforward: `(gelu(x · w_gate) ⊙ (x · w_up)) · w_down`.
pub fn geglu_ffn(
    x: &[f32],
    w_gate: &Matrix,
    w_up: &Matrix,
    w_down: &Matrix,
    gelu: fn(f32) -> f32,
) -> Result<Vec<f32>, KernelError> {
    if w_gate.shape() != w_up.shape() || w_down.rows != w_gate.cols || w_down.cols != x.len() {
        return Err(shape_err(
            "geglu_ffn",
            format!(
                "gate {:?}, up {:?}, down {:?}, input {}",
                w_gate.shape(),
                w_up.shape(),
                w_down.shape(),
                x.len()
            ),
        ));
    }
    let gate = vec_mat(x, w_gate)?;
    let up = vec_mat(x, w_up)?;
    let hidden: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| gelu(g) * u).collect();
    vec_mat(&hidden, w_down)
}

/// Rotary frequency for pair `i` of a `dim`-wide head.
pub fn rope_theta(i: usize, dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * i as f64 / dim as f64)
}

/// Rotates adjacent pairs `(v[2i], v[2i+1])` by `position * theta_i`.
pub fn rope_apply(v: &[f32], position: usize, base: f64) -> Result<Vec<f32>, KernelError> {
    let mut out = v.to_vec();
    rope_in_place(&mut out, position, base)?;
    Ok(out)
}

pub fn rope_in_place(v: &mut [f32], position: usize, base: f64) -> Result<(), KernelError> {
    let dim = v.len();
    if !dim.is_multiple_of(2) {
        return Err(KernelError::OddRotaryDim(dim));
    }
    if position == 0 {
        return Ok(());
    }
    for i in 0..dim / 2 {
        // angle in f64 so large positions keep their phase
        let angle = position as f64 * rope_theta(i, dim, base);
        let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
    Ok(())
}
