//! Label rotary position embedding.
//!
//! Each token carries a real-valued label instead of a sequence position.
//! Dimension pair `(2m, 2m+1)` of a token with label `l` is rotated by
//! `l · θ_base · freq_m`, so the query/key inner product depends only on the
//! label difference. Tokens whose labels match the key's label keep their
//! full alignment; distant labels are decorrelated.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{softmax_rows_masked, KeyMask, Matrix};

pub const DEFAULT_THETA_BASE: f64 = 1.0;
const FREQ_BASE: f64 = 10_000.0;

/// How a token's label turns into its base rotation angle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleMode {
    /// `θ_i = l_i · θ_base`.
    #[default]
    Linear,
    /// `l_i · θ_i = l_i² · θ_base`. Not relative: kept only for comparison runs.
    Quadratic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotaryConfig {
    theta_base: f64,
    dim: usize,
    freqs: Vec<f64>,
    mode: AngleMode,
}

impl RotaryConfig {
    pub fn new(dim: usize, theta_base: f64) -> Result<Self> {
        Self::with_mode(dim, theta_base, AngleMode::Linear)
    }

    pub fn with_mode(dim: usize, theta_base: f64, mode: AngleMode) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return config_err(format!("rotary dimension must be even and positive, got {dim}"));
        }
        if !theta_base.is_finite() {
            return config_err("theta_base must be finite");
        }
        let freqs = (0..dim / 2)
            .map(|m| FREQ_BASE.powf(-2.0 * m as f64 / dim as f64))
            .collect();
        Ok(Self {
            theta_base,
            dim,
            freqs,
            mode,
        })
    }

    /// Overrides the per-pair frequency schedule. Frequencies must be
    /// positive and strictly decreasing.
    pub fn with_freqs(mut self, freqs: Vec<f64>) -> Result<Self> {
        if freqs.len() != self.dim / 2 {
            return config_err(format!("need {} frequencies, got {}", self.dim / 2, freqs.len()));
        }
        if freqs.iter().any(|&f| !(f > 0.0 && f.is_finite())) || freqs.windows(2).any(|w| w[1] >= w[0]) {
            return config_err("frequencies must be positive and strictly decreasing");
        }
        self.freqs = freqs;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn mode(&self) -> AngleMode {
        self.mode
    }

    /// Base angle for a label, before the per-pair frequency.
    pub fn angle(&self, label: f64) -> f64 {
        match self.mode {
            AngleMode::Linear => label * self.theta_base,
            AngleMode::Quadratic => label * label * self.theta_base,
        }
    }
}

/// One label per token.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector(Vec<f64>);

impl LabelVector {
    pub fn new(labels: Vec<f64>) -> Result<Self> {
        if labels.iter().any(|l| !l.is_finite()) {
            return config_err("labels must be finite");
        }
        Ok(Self(labels))
    }

    pub fn constant(len: usize, label: f64) -> Self {
        Self(vec![label; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn concat(&self, other: &LabelVector) -> LabelVector {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        LabelVector(v)
    }
}

fn check(tokens: &Matrix, labels: &LabelVector, cfg: &RotaryConfig) -> Result<()> {
    if tokens.cols() != cfg.dim {
        return config_err(format!("token width {} != rotary dim {}", tokens.cols(), cfg.dim));
    }
    if labels.len() != tokens.rows() {
        return config_err(format!("{} labels for {} tokens", labels.len(), tokens.rows()));
    }
    Ok(())
}

fn rotate_signed(tokens: &Matrix, labels: &LabelVector, cfg: &RotaryConfig, sign: f64) -> Result<Matrix> {
    check(tokens, labels, cfg)?;
    let mut out = tokens.clone();
    for (i, &label) in labels.as_slice().iter().enumerate() {
        let base = sign * cfg.angle(label);
        if base == 0.0 {
            continue;
        }
        let row = out.row_mut(i);
        for (m, &freq) in cfg.freqs.iter().enumerate() {
            let (s, c) = (base * freq).sin_cos();
            let (x, y) = (row[2 * m], row[2 * m + 1]);
            row[2 * m] = x * c - y * s;
            row[2 * m + 1] = x * s + y * c;
        }
    }
    Ok(out)
}

/// Rotates each token by its label's angle.
pub fn rotate(tokens: &Matrix, labels: &LabelVector, cfg: &RotaryConfig) -> Result<Matrix> {
    rotate_signed(tokens, labels, cfg, 1.0)
}

/// Inverse of [`rotate`]; also the transpose, which is what gradients need.
pub fn rotate_inverse(tokens: &Matrix, labels: &LabelVector, cfg: &RotaryConfig) -> Result<Matrix> {
    rotate_signed(tokens, labels, cfg, -1.0)
}

/// Pre-softmax scores `rotate(q)·rotate(k)ᵀ/√d`.
pub fn labeled_logits(
    q: &Matrix,
    q_labels: &LabelVector,
    k: &Matrix,
    k_labels: &LabelVector,
    cfg: &RotaryConfig,
) -> Result<Matrix> {
    let qr = rotate(q, q_labels, cfg)?;
    let kr = rotate(k, k_labels, cfg)?;
    Ok(qr.matmul_t(&kr)?.scale(1.0 / (cfg.dim as f64).sqrt()))
}

/// Cross-attention with rotated queries and keys. Values are not rotated.
pub fn labeled_cross_attention(
    q: &Matrix,
    q_labels: &LabelVector,
    k: &Matrix,
    k_labels: &LabelVector,
    v: &Matrix,
    cfg: &RotaryConfig,
) -> Result<(Matrix, Matrix)> {
    labeled_masked_attention(q, q_labels, k, k_labels, v, cfg, &KeyMask::all(q.rows(), k.rows()))
}

/// [`labeled_cross_attention`] restricted to the pairs allowed by `mask`.
pub fn labeled_masked_attention(
    q: &Matrix,
    q_labels: &LabelVector,
    k: &Matrix,
    k_labels: &LabelVector,
    v: &Matrix,
    cfg: &RotaryConfig,
    mask: &KeyMask,
) -> Result<(Matrix, Matrix)> {
    if k.rows() != v.rows() {
        return shape_err("labeled_cross_attention", format!("k {:?} vs v {:?}", k.shape(), v.shape()));
    }
    let logits = labeled_logits(q, q_labels, k, k_labels, cfg)?;
    let weights = softmax_rows_masked(&logits, mask)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}
