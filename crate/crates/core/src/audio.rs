//! Audio condition pipeline: context-window concatenation of per-frame
//! embeddings, then the adapter that compresses them to the latent frame rate.
//!
//! The first audio frame is encoded on its own. Frames `2..l` are mean-pooled
//! in windows of [`TEMPORAL_STRIDE`], so `l` audio frames become
//! `1 + ceil((l − 1)/4)` condition frames, matching the video latent length.

use std::path::Path;

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Matrix, Rng};
use crate::tensor_io;

/// Temporal compression factor of the video autoencoder.
pub const TEMPORAL_STRIDE: usize = 4;

pub const DEFAULT_CONTEXT: usize = 5;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_COND_DIM: usize = 32;

/// `l × d_a` per-frame acoustic embeddings, aligned to video frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEmbeddingSequence(Matrix);

impl AudioEmbeddingSequence {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return config_err(format!("audio sequence must be non-empty, got {:?}", values.shape()));
        }
        Ok(Self(values))
    }

    /// Seeded synthetic embeddings: a shared per-dimension offset plus
    /// independent per-frame noise.
    pub fn synthetic(frames: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let offset: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        Self::new(Matrix::from_fn(frames, dim, |_, c| offset[c] + rng.normal()))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// Frames `start..=end`, 1-indexed inclusive, as used by chunk plans.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start == 0 || start > end || end > self.frames() {
            return shape_err("slice_frames", format!("{start}..={end} of {} frames", self.frames()));
        }
        Self::new(self.0.slice_rows(start - 1, end)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(tensor_io::read_matrix(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        tensor_io::write_matrix(path, &self.0)
    }
}

/// Concatenates each frame with its `⌊k/2⌋` neighbours on either side,
/// repeating the edge frames past the sequence boundaries.
pub fn context_window(seq: &AudioEmbeddingSequence, k: usize) -> Result<AudioEmbeddingSequence> {
    if k == 0 || k.is_multiple_of(2) {
        return config_err(format!("context length must be odd and positive, got {k}"));
    }
    let l = seq.frames() as isize;
    let d = seq.dim();
    let half = (k / 2) as isize;
    let src = seq.values();
    let mut out = Matrix::zeros(seq.frames(), k * d);
    for i in 0..l {
        let row = out.row_mut(i as usize);
        for (slot, offset) in (-half..=half).enumerate() {
            let j = (i + offset).clamp(0, l - 1) as usize;
            row[slot * d..(slot + 1) * d].copy_from_slice(src.row(j));
        }
    }
    AudioEmbeddingSequence::new(out)
}

/// Mean-pools non-overlapping windows of four frames; a short final window
/// is averaged over the frames it actually has.
pub fn temporal_downsample(seq: &AudioEmbeddingSequence) -> AudioEmbeddingSequence {
    let src = seq.values();
    let out_frames = seq.frames().div_ceil(TEMPORAL_STRIDE);
    let mut out = Matrix::zeros(out_frames, seq.dim());
    for w in 0..out_frames {
        let start = w * TEMPORAL_STRIDE;
        let end = (start + TEMPORAL_STRIDE).min(seq.frames());
        let n = (end - start) as f64;
        let row = out.row_mut(w);
        for r in start..end {
            for (o, &v) in row.iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        for o in row.iter_mut() {
            *o /= n;
        }
    }
    AudioEmbeddingSequence(out)
}

/// Number of condition frames produced from `l` audio frames.
pub fn compressed_frames(l: usize) -> usize {
    if l <= 1 {
        1
    } else {
        1 + (l - 1).div_ceil(TEMPORAL_STRIDE)
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Two-layer perceptron `gelu(x·W1 + b1)·W2 + b2`, applied row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, output),
            b2: vec![0.0; output],
        }
    }

    /// Weights drawn with std `1/√fan_in`, biases zero.
    pub fn random(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w1: rng.normal_matrix(input, hidden, 1.0 / (input as f64).sqrt()),
            b1: vec![0.0; hidden],
            w2: rng.normal_matrix(hidden, output, 1.0 / (hidden as f64).sqrt()),
            b2: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.b1.len() != self.w1.cols() || self.w2.rows() != self.w1.cols() || self.b2.len() != self.w2.cols() {
            return config_err(format!("{name}: inconsistent perceptron widths"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.matmul(&self.w1)?;
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(&self.b1) {
                *v = gelu(*v + b);
            }
        }
        let mut y = h.matmul(&self.w2)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// The three perceptrons of the audio adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// Encodes the (windowed) first frame: `k·d_a → d_h → d_c`.
    pub enc_first: Mlp,
    /// Encodes each pooled later frame: `k·d_a → d_h → d_c`.
    pub enc_down: Mlp,
    /// Fuses the concatenated sequence frame by frame: `d_c → d_h → d_c`.
    pub enc_fuse: Mlp,
}

impl AdapterParams {
    pub fn zeros(k: usize, d_a: usize, d_h: usize, d_c: usize) -> Self {
        Self {
            enc_first: Mlp::zeros(k * d_a, d_h, d_c),
            enc_down: Mlp::zeros(k * d_a, d_h, d_c),
            enc_fuse: Mlp::zeros(d_c, d_h, d_c),
        }
    }

    pub fn random(k: usize, d_a: usize, d_h: usize, d_c: usize, rng: &mut Rng) -> Self {
        Self {
            enc_first: Mlp::random(k * d_a, d_h, d_c, rng),
            enc_down: Mlp::random(k * d_a, d_h, d_c, rng),
            enc_fuse: Mlp::random(d_c, d_h, d_c, rng),
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.enc_fuse.output_dim()
    }

    fn validate(&self, windowed_dim: usize) -> Result<()> {
        self.enc_first.check("enc_first")?;
        self.enc_down.check("enc_down")?;
        self.enc_fuse.check("enc_fuse")?;
        if self.enc_first.input_dim() != windowed_dim || self.enc_down.input_dim() != windowed_dim {
            return config_err(format!(
                "adapter expects {}-dim windowed frames, input has {windowed_dim}",
                self.enc_first.input_dim()
            ));
        }
        let d_c = self.enc_fuse.input_dim();
        if self.enc_first.output_dim() != d_c || self.enc_down.output_dim() != d_c || self.enc_fuse.output_dim() != d_c {
            return config_err("adapter encoders disagree on the condition width");
        }
        Ok(())
    }
}

/// Compressed audio condition `c_a`: `f_a × d_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedAudioCondition(Matrix);

impl CompressedAudioCondition {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return config_err("compressed audio condition must be non-empty");
        }
        Ok(Self(values))
    }

    pub fn latent_frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

/// Runs context windowing, the first-frame/later-frame split, pooling, the
/// two encoders and the fusing perceptron.
pub fn adapter_forward(
    seq: &AudioEmbeddingSequence,
    k: usize,
    params: &AdapterParams,
) -> Result<CompressedAudioCondition> {
    let windowed = context_window(seq, k)?;
    params.validate(windowed.dim())?;
    let first = params.enc_first.forward(&windowed.values().slice_rows(0, 1)?)?;
    let joined = if windowed.frames() == 1 {
        first
    } else {
        let rest = AudioEmbeddingSequence(windowed.values().slice_rows(1, windowed.frames())?);
        let pooled = temporal_downsample(&rest);
        let later = params.enc_down.forward(pooled.values())?;
        Matrix::vstack(&first, &later)?
    };
    CompressedAudioCondition::new(params.enc_fuse.forward(&joined)?)
}
