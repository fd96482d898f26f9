//! A single-head audio cross-attention block trained with plain SGD on a
//! synthetic two-speaker binding task.
//!
//! `prediction = z·W_base + attention(z·W_q, a·W_k, a·W_v)·W_o`, where
//! `W_base` stands in for the frozen backbone and only the four attention
//! projections are trained. Each person token's target adds a fixed linear
//! map of its own speaker's audio frame to the base output, so the loss is
//! minimised only when every token routes its attention to the right stream.
//!
//! The scenario fixes the layout, appearance, label map and maps; audio and
//! latent noise are redrawn every step, so a scheme cannot pass by
//! memorising one particular pair of streams.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{adapter_forward, AdapterParams, AudioEmbeddingSequence, TEMPORAL_STRIDE};
use crate::error::{config_err, Error, Result};
use crate::grid::TokenGrid;
use crate::injection::{binding_score, AttentionPlan, AttentionSpan, AudioStreamPair, BindingReport, Scheme, SchemeSpec};
use crate::localization::{build_label_map, Category, LabelRangeConfig, RefToVideoAttentionMap, SubjectMaskSet, TokenLabelMap};
use crate::lrope::{rotate_inverse, AngleMode, RotaryConfig};
use crate::numerics::{Matrix, Rng};

/// Loss above which training is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Trainable projections plus the frozen stand-in for the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBlockParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub frozen_base: Matrix,
}

impl ToyBlockParams {
    /// Projections drawn with std `init_scale/√d`; the frozen map with std `1/√d`.
    pub fn init(d: usize, init_scale: f64, rng: &mut Rng) -> Self {
        let s = init_scale / (d as f64).sqrt();
        Self {
            w_q: rng.normal_matrix(d, d, s),
            w_k: rng.normal_matrix(d, d, s),
            w_v: rng.normal_matrix(d, d, s),
            w_o: rng.normal_matrix(d, d, s),
            frozen_base: rng.normal_matrix(d, d, 1.0 / (d as f64).sqrt()),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn trainable(&self) -> [&Matrix; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn trainable_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    /// Bundle order: `W_q, W_k, W_v, W_o, W_base`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        crate::tensor_io::encode_bundle(&[&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.frozen_base])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ms = crate::tensor_io::decode_bundle(bytes)?;
        let [w_q, w_k, w_v, w_o, frozen_base]: [Matrix; 5] = ms
            .try_into()
            .map_err(|v: Vec<Matrix>| Error::Parse(format!("expected 5 matrices, found {}", v.len())))?;
        let d = w_q.rows();
        if [&w_q, &w_k, &w_v, &w_o, &frozen_base].iter().any(|m| m.shape() != (d, d)) {
            return Err(Error::Parse("parameter matrices must all be square and equal-sized".into()));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            frozen_base,
        })
    }
}

/// Gradients for the trainable projections. There is deliberately no slot
/// for the frozen map.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGradients {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl ToyGradients {
    pub fn as_array(&self) -> [&Matrix; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }
}

pub const PARAM_NAMES: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Person 1 on the left, person 2 on the right, in every frame.
    #[default]
    Static,
    /// The persons trade sides from `swap_frame` onwards.
    Swap,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Static => "static",
            ScenarioKind::Swap => "swap",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(ScenarioKind::Static),
            "swap" => Ok(ScenarioKind::Swap),
            other => Err(Error::Parse(format!("unknown scenario {other:?} (expected static or swap)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: TokenGrid,
    /// Model width `d` (also the compressed audio width).
    pub dim: usize,
    /// Raw audio embedding width `d_a`.
    pub audio_dim: usize,
    /// Audio context length `k`.
    pub context: usize,
    pub adapter_hidden: usize,
    pub kind: ScenarioKind,
    /// First frame (0-based) in which the persons have swapped sides.
    pub swap_frame: usize,
    pub labels: LabelRangeConfig,
    /// Std of per-token noise around each subject's appearance vector.
    pub token_noise: f64,
    /// Gain of the audio-to-target map.
    pub target_gain: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid: TokenGrid {
                frames: 4,
                height: 3,
                width: 4,
            },
            dim: 16,
            audio_dim: 8,
            context: 5,
            adapter_hidden: 32,
            kind: ScenarioKind::Static,
            swap_frame: 1,
            labels: LabelRangeConfig::default(),
            token_noise: 0.5,
            target_gain: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        TokenGrid::new(self.grid.frames, self.grid.height, self.grid.width)?;
        if self.grid.height < 2 || self.grid.width < 2 || !self.grid.width.is_multiple_of(2) {
            return config_err("scenario grid needs height ≥ 2 and an even width ≥ 2");
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return config_err(format!("model width must be even and positive, got {}", self.dim));
        }
        if self.audio_dim == 0 || self.adapter_hidden == 0 {
            return config_err("audio widths must be positive");
        }
        if self.context == 0 || self.context.is_multiple_of(2) {
            return config_err(format!("context length must be odd, got {}", self.context));
        }
        if self.kind == ScenarioKind::Swap && (self.swap_frame == 0 || self.swap_frame >= self.grid.frames) {
            return config_err(format!("swap frame {} must lie in 1..{}", self.swap_frame, self.grid.frames));
        }
        if !(self.token_noise >= 0.0 && self.token_noise.is_finite() && self.target_gain.is_finite()) {
            return config_err("noise and gain must be finite, noise non-negative");
        }
        self.labels.validate()
    }

    /// Raw audio frames per stream; compresses to exactly one condition frame
    /// per latent frame.
    pub fn audio_frames(&self) -> usize {
        1 + TEMPORAL_STRIDE * (self.grid.frames - 1)
    }
}

/// One drawn training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub z: Matrix,
    pub audio: AudioStreamPair,
    pub target: Matrix,
}

/// Fixed structure of the binding task.
#[derive(Clone, Debug)]
pub struct SyntheticScenario {
    pub config: ScenarioConfig,
    pub truth: Vec<Category>,
    pub masks: SubjectMaskSet,
    pub attention: RefToVideoAttentionMap,
    pub label_map: TokenLabelMap,
    appearance: [Vec<f64>; 3],
    adapter: AdapterParams,
    target_map: Matrix,
}

impl SyntheticScenario {
    pub fn new(config: ScenarioConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let grid = config.grid;
        let (h, w) = (grid.height, grid.width);
        let half = w / 2;
        let swapped = |frame: usize| config.kind == ScenarioKind::Swap && frame >= config.swap_frame;
        let category_at = |frame: usize, row: usize, col: usize| {
            if row == 0 {
                Category::Background
            } else if (col < half) != swapped(frame) {
                Category::Person1
            } else {
                Category::Person2
            }
        };
        let truth: Vec<Category> = (0..grid.tokens())
            .map(|i| {
                let (f, r, c) = grid.coords(i);
                category_at(f, r, c)
            })
            .collect();
        let masks = SubjectMaskSet::from_cells(h, w, (0..h * w).map(|i| category_at(0, i / w, i % w)).collect())?;

        // Each token attends only to its own subject's reference cells, with a
        // strength that varies by position so labels spread over the range.
        let attention = Matrix::from_fn(grid.tokens(), h * w, |i, r| {
            let (_, row, col) = grid.coords(i);
            if masks.cells()[r] == truth[i] {
                1.0 + 0.5 * row as f64 + 0.25 * (col % half) as f64
            } else {
                0.0
            }
        });
        let attention = RefToVideoAttentionMap::new(attention, grid.frames, h, w)?;
        let label_map = build_label_map(&attention, &masks, &config.labels)?;
        debug_assert_eq!(label_map.categories, truth);

        let d = config.dim;
        let appearance = [(); 3].map(|_| (0..d).map(|_| rng.normal()).collect());
        let adapter = AdapterParams::random(config.context, config.audio_dim, config.adapter_hidden, d, rng);
        let target_map = rng.normal_matrix(d, d, config.target_gain / (d as f64).sqrt());
        Ok(Self {
            config,
            truth,
            masks,
            attention,
            label_map,
            appearance,
            adapter,
            target_map,
        })
    }

    pub fn grid(&self) -> TokenGrid {
        self.config.grid
    }

    /// Column index separating the left and right halves of each frame.
    pub fn split_col(&self) -> usize {
        self.config.grid.width / 2
    }

    pub fn span(&self) -> AttentionSpan {
        AttentionSpan::PerFrame {
            tokens_per_frame: self.config.grid.tokens_per_frame(),
        }
    }

    pub fn draw_audio(&self, rng: &mut Rng) -> Result<AudioStreamPair> {
        let mut stream = || -> Result<Matrix> {
            let raw = AudioEmbeddingSequence::synthetic(self.config.audio_frames(), self.config.audio_dim, rng)?;
            Ok(adapter_forward(&raw, self.config.context, &self.adapter)?.into_inner())
        };
        let s1 = stream()?;
        let s2 = stream()?;
        AudioStreamPair::new(s1, s2)
    }

    /// Draws latents and audio, and builds the matching targets under `base`.
    pub fn sample(&self, base: &Matrix, rng: &mut Rng) -> Result<Sample> {
        let d = self.config.dim;
        let noise = self.config.token_noise;
        let z = Matrix::from_fn(self.truth.len(), d, |i, c| self.appearance[self.truth[i].index()][c] + noise * rng.normal());
        let audio = self.draw_audio(rng)?;
        let target = self.targets(&z, &audio, base)?;
        Ok(Sample { z, audio, target })
    }

    /// `z·base`, plus the own stream's current frame through the target map
    /// for person tokens.
    pub fn targets(&self, z: &Matrix, audio: &AudioStreamPair, base: &Matrix) -> Result<Matrix> {
        let mut target = z.matmul(base)?;
        let drive = [audio.stream1().matmul(&self.target_map)?, audio.stream2().matmul(&self.target_map)?];
        let grid = self.config.grid;
        for (i, cat) in self.truth.iter().enumerate() {
            if *cat == Category::Background {
                continue;
            }
            let frame = grid.coords(i).0;
            for (t, &v) in target.row_mut(i).iter_mut().zip(drive[cat.index()].row(frame)) {
                *t += v;
            }
        }
        Ok(target)
    }

    /// Same sample with both audio streams zeroed and the target reduced to
    /// the base output.
    pub fn zero_audio(&self, sample: &Sample, base: &Matrix) -> Result<Sample> {
        let audio = sample.audio.map(|m| Ok(Matrix::zeros(m.rows(), m.cols())))?;
        Ok(Sample {
            target: sample.z.matmul(base)?,
            z: sample.z.clone(),
            audio,
        })
    }

    /// Compiles `scheme` for this scenario's token layout.
    pub fn plan(&self, scheme: Scheme, rotary: &RotaryConfig) -> Result<AttentionPlan> {
        self.plan_with(scheme, rotary, Some(&self.label_map))
    }

    pub fn plan_with(&self, scheme: Scheme, rotary: &RotaryConfig, label_map: Option<&TokenLabelMap>) -> Result<AttentionPlan> {
        let spec = match scheme {
            Scheme::Concat => SchemeSpec::Concat,
            Scheme::Add => SchemeSpec::Add,
            Scheme::Split => SchemeSpec::Split {
                grid: self.config.grid,
                split_col: self.split_col(),
            },
            Scheme::Lrope => SchemeSpec::Lrope {
                label_map: label_map.ok_or_else(|| Error::Config("lrope scheme requires a label map".into()))?,
                labels: &self.config.labels,
                rotary,
            },
        };
        AttentionPlan::new(spec, self.truth.len(), self.config.grid.frames, self.span())
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    z: Matrix,
    audio: Matrix,
    v: Matrix,
    attn_out: Matrix,
    passes: Vec<crate::injection::PassTrace>,
    pub routing: Matrix,
    pub prediction: Matrix,
}

/// Runs the block. `plan` fixes the scheme; an lrope plan carries its label map.
pub fn forward(params: &ToyBlockParams, z: &Matrix, audio: &AudioStreamPair, plan: &AttentionPlan) -> Result<ForwardCache> {
    let q = z.matmul(&params.w_q)?;
    let keys = audio.map(|a| a.matmul(&params.w_k))?;
    let values = audio.map(|a| a.matmul(&params.w_v))?;
    let out = plan.run(&q, &keys, &values)?;
    let prediction = z.matmul(&params.frozen_base)?.add(&out.out.matmul(&params.w_o)?)?;
    Ok(ForwardCache {
        z: z.clone(),
        audio: audio.stacked(),
        v: values.stacked(),
        attn_out: out.out,
        passes: out.passes,
        routing: out.routing,
        prediction,
    })
}

/// Mean over tokens of the squared error norm.
pub fn mse(prediction: &Matrix, target: &Matrix) -> Result<f64> {
    let diff = prediction.sub(target)?;
    Ok(diff.as_slice().iter().map(|v| v * v).sum::<f64>() / prediction.rows() as f64)
}

/// Gradient of [`mse`] with respect to the prediction.
pub fn mse_grad(prediction: &Matrix, target: &Matrix) -> Result<Matrix> {
    Ok(prediction.sub(target)?.scale(2.0 / prediction.rows() as f64))
}

/// Exact gradients of a scalar loss whose derivative with respect to the
/// prediction is `upstream`.
pub fn backward(params: &ToyBlockParams, plan: &AttentionPlan, cache: &ForwardCache, upstream: &Matrix) -> Result<ToyGradients> {
    let d_out = upstream.matmul_t(&params.w_o)?;
    let w_o = cache.attn_out.t_matmul(upstream)?;

    let inv_sqrt_d = 1.0 / (params.dim() as f64).sqrt();
    let mut d_q = Matrix::zeros(cache.z.rows(), params.dim());
    let mut d_k = Matrix::zeros(cache.audio.rows(), params.dim());
    let mut d_v = Matrix::zeros(cache.v.rows(), cache.v.cols());
    for pass in &cache.passes {
        let w = &pass.weights;
        d_v.axpy(1.0, &w.t_matmul(&d_out)?)?;
        let d_w = d_out.matmul_t(&cache.v)?;
        // Softmax backward: dL = W ⊙ (dW − rowsum(dW ⊙ W)).
        let mut d_logits = Matrix::zeros(w.rows(), w.cols());
        for r in 0..w.rows() {
            let wr = w.row(r);
            let gr = d_w.row(r);
            let inner: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for (o, (&a, &g)) in d_logits.row_mut(r).iter_mut().zip(wr.iter().zip(gr)) {
                *o = a * (g - inner) * inv_sqrt_d;
            }
        }
        d_q.axpy(1.0, &d_logits.matmul(&pass.k)?)?;
        d_k.axpy(1.0, &d_logits.t_matmul(&pass.q)?)?;
    }
    if let Some(rot) = &plan.rotary {
        d_q = rotate_inverse(&d_q, &rot.query, &rot.cfg)?;
        d_k = rotate_inverse(&d_k, &rot.key, &rot.cfg)?;
    }
    Ok(ToyGradients {
        w_q: cache.z.t_matmul(&d_q)?,
        w_k: cache.audio.t_matmul(&d_k)?,
        w_v: cache.audio.t_matmul(&d_v)?,
        w_o,
    })
}

/// Loss of `params` on one sample.
pub fn sample_loss(params: &ToyBlockParams, sample: &Sample, plan: &AttentionPlan) -> Result<f64> {
    let cache = forward(params, &sample.z, &sample.audio, plan)?;
    mse(&cache.prediction, &sample.target)
}

/// Loss and analytic gradients on one sample.
pub fn loss_and_grad(params: &ToyBlockParams, sample: &Sample, plan: &AttentionPlan) -> Result<(f64, ToyGradients, ForwardCache)> {
    let cache = forward(params, &sample.z, &sample.audio, plan)?;
    let loss = mse(&cache.prediction, &sample.target)?;
    let grads = backward(params, plan, &cache, &mse_grad(&cache.prediction, &sample.target)?)?;
    Ok((loss, grads, cache))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Fraction of steps trained with both audio streams zeroed.
    pub i2v_fraction: f64,
    pub theta_base: f64,
    pub angle_mode: AngleMode,
    /// Scale of the projection initialisation (see [`ToyBlockParams::init`]).
    pub init_scale: f64,
    /// Held-out samples averaged for the final binding report.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 2000,
            seed: 0,
            scheme: Scheme::Lrope,
            i2v_fraction: 0.0,
            theta_base: 1.0,
            angle_mode: AngleMode::Linear,
            init_scale: 0.5,
            eval_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.i2v_fraction) {
            return config_err(format!("i2v fraction {} outside [0, 1]", self.i2v_fraction));
        }
        if !self.theta_base.is_finite() || !self.init_scale.is_finite() {
            return config_err("theta_base and init_scale must be finite");
        }
        if self.eval_samples == 0 {
            return config_err("need at least one evaluation sample");
        }
        Ok(())
    }

    pub fn rotary(&self, dim: usize) -> Result<RotaryConfig> {
        RotaryConfig::with_mode(dim, self.theta_base, self.angle_mode)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: ToyBlockParams,
    pub params: ToyBlockParams,
    /// Training loss at every step, before that step's update.
    pub losses: Vec<f64>,
    /// Held-out loss before and after training.
    pub eval_loss_before: f64,
    pub eval_loss_after: f64,
    pub binding_before: BindingReport,
    pub binding: BindingReport,
}

/// Binding and loss averaged over held-out samples.
pub fn evaluate(
    params: &ToyBlockParams,
    scenario: &SyntheticScenario,
    plan: &AttentionPlan,
    samples: &[Sample],
) -> Result<(BindingReport, f64)> {
    let mut p1 = 0.0;
    let mut p2 = 0.0;
    let mut loss = 0.0;
    for s in samples {
        let cache = forward(params, &s.z, &s.audio, plan)?;
        let r = binding_score(&cache.routing, &scenario.truth, plan.frames())?;
        p1 += r.person1;
        p2 += r.person2;
        loss += mse(&cache.prediction, &s.target)?;
    }
    let n = samples.len() as f64;
    let (p1, p2) = (p1 / n, p2 / n);
    Ok((
        BindingReport {
            scheme: Some(plan.scheme()),
            person1: p1,
            person2: p2,
            mean: 0.5 * (p1 + p2),
        },
        loss / n,
    ))
}

/// SGD on the four projections. The generator is split into independent
/// streams for initialisation, training data and evaluation data, so every
/// scheme trained with the same seed sees the same samples.
pub fn train(config: &TrainConfig, scenario: &SyntheticScenario) -> Result<TrainOutcome> {
    config.validate()?;
    let d = scenario.config.dim;
    let rotary = config.rotary(d)?;
    let plan = scenario.plan(config.scheme, &rotary)?;

    let mut root = Rng::new(config.seed);
    let mut init_rng = root.fork();
    let mut data_rng = root.fork();
    let mut eval_rng = root.fork();
    let mut task_rng = root.fork();

    let initial = ToyBlockParams::init(d, config.init_scale, &mut init_rng);
    let eval_set = (0..config.eval_samples)
        .map(|_| scenario.sample(&initial.frozen_base, &mut eval_rng))
        .collect::<Result<Vec<_>>>()?;
    let (binding_before, eval_loss_before) = evaluate(&initial, scenario, &plan, &eval_set)?;

    let mut params = initial.clone();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut sample = scenario.sample(&params.frozen_base, &mut data_rng)?;
        if task_rng.uniform() < config.i2v_fraction {
            sample = scenario.zero_audio(&sample, &params.frozen_base)?;
        }
        let (loss, grads, _) = loss_and_grad(&params, &sample, &plan)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        for (p, g) in params.trainable_mut().into_iter().zip(grads.as_array()) {
            p.axpy(-config.learning_rate, g)?;
        }
    }

    let (binding, eval_loss_after) = evaluate(&params, scenario, &plan, &eval_set)?;
    Ok(TrainOutcome {
        initial,
        params,
        losses,
        eval_loss_before,
        eval_loss_after,
        binding_before,
        binding,
    })
}
