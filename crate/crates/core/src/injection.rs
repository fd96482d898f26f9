//! Multi-stream audio injection schemes and the attention-mass binding metric.
//!
//! All four schemes are expressed as one or more attention passes over the
//! stacked keys `[stream1; stream2]`, each pass restricted by a key mask:
//!
//! | scheme | passes | mask                                   | labels |
//! |--------|--------|----------------------------------------|--------|
//! | concat | 1      | span                                   | none   |
//! | add    | 2      | span ∧ stream1, span ∧ stream2 (summed) | none   |
//! | split  | 1      | span ∧ (left tokens → stream1, right → stream2) | none |
//! | lrope  | 1      | span                                   | token labels vs `c_a1`/`c_a2` |
//!
//! Masked keys get exactly zero weight, so the add pass over the stacked
//! keys equals two separate single-stream attentions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::CompressedAudioCondition;
use crate::error::{config_err, shape_err, Error, Result};
use crate::grid::TokenGrid;
use crate::localization::{Category, LabelRangeConfig, TokenLabelMap};
use crate::lrope::{rotate, LabelVector, RotaryConfig};
use crate::numerics::{softmax_rows_masked, KeyMask, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Concat,
    Add,
    Split,
    Lrope,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Concat, Scheme::Add, Scheme::Split, Scheme::Lrope];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Concat => "concat",
            Scheme::Add => "add",
            Scheme::Split => "split",
            Scheme::Lrope => "lrope",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown scheme {s:?} (expected concat, add, split or lrope)")))
    }
}

/// Two audio streams of equal shape, `frames × dim` each.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioStreamPair {
    stream1: Matrix,
    stream2: Matrix,
}

impl AudioStreamPair {
    pub fn new(stream1: Matrix, stream2: Matrix) -> Result<Self> {
        if stream1.shape() != stream2.shape() {
            return shape_err("AudioStreamPair", format!("{:?} vs {:?}", stream1.shape(), stream2.shape()));
        }
        if stream1.rows() == 0 {
            return config_err("audio streams must have at least one frame");
        }
        Ok(Self { stream1, stream2 })
    }

    pub fn from_conditions(a: CompressedAudioCondition, b: CompressedAudioCondition) -> Result<Self> {
        Self::new(a.into_inner(), b.into_inner())
    }

    pub fn stream1(&self) -> &Matrix {
        &self.stream1
    }

    pub fn stream2(&self) -> &Matrix {
        &self.stream2
    }

    pub fn frames(&self) -> usize {
        self.stream1.rows()
    }

    pub fn dim(&self) -> usize {
        self.stream1.cols()
    }

    /// `[stream1; stream2]`: key column `j < frames` belongs to stream 1.
    pub fn stacked(&self) -> Matrix {
        Matrix::vstack(&self.stream1, &self.stream2).expect("equal widths")
    }

    pub fn map(&self, f: impl Fn(&Matrix) -> Result<Matrix>) -> Result<Self> {
        Self::new(f(&self.stream1)?, f(&self.stream2)?)
    }
}

/// Which audio frames a query token may attend to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionSpan {
    /// Every query sees every audio frame of the streams it is routed to.
    #[default]
    Global,
    /// Query token `i` sees only audio frame `i / tokens_per_frame` of each stream.
    PerFrame { tokens_per_frame: usize },
}

impl AttentionSpan {
    fn mask(&self, queries: usize, frames: usize) -> Result<KeyMask> {
        match *self {
            AttentionSpan::Global => Ok(KeyMask::all(queries, 2 * frames)),
            AttentionSpan::PerFrame { tokens_per_frame } => {
                if tokens_per_frame == 0 {
                    return config_err("tokens_per_frame must be positive");
                }
                let query_frames = queries.div_ceil(tokens_per_frame);
                if query_frames > frames {
                    return config_err(format!(
                        "{query_frames} query frames but only {frames} audio frames per stream"
                    ));
                }
                Ok(KeyMask::from_fn(queries, 2 * frames, |i, j| i / tokens_per_frame == j % frames))
            }
        }
    }
}

/// Everything a scheme needs beyond queries, keys and values.
#[derive(Clone, Copy, Debug)]
pub enum SchemeSpec<'a> {
    Concat,
    Add,
    Split {
        grid: TokenGrid,
        /// Columns `< split_col` of every frame are routed to stream 1.
        split_col: usize,
    },
    Lrope {
        label_map: &'a TokenLabelMap,
        labels: &'a LabelRangeConfig,
        rotary: &'a RotaryConfig,
    },
}

impl SchemeSpec<'_> {
    pub fn scheme(&self) -> Scheme {
        match self {
            SchemeSpec::Concat => Scheme::Concat,
            SchemeSpec::Add => Scheme::Add,
            SchemeSpec::Split { .. } => Scheme::Split,
            SchemeSpec::Lrope { .. } => Scheme::Lrope,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct RotaryLabels {
    pub(crate) query: LabelVector,
    pub(crate) key: LabelVector,
    pub(crate) cfg: RotaryConfig,
}

/// A scheme compiled for a fixed number of queries and audio frames.
#[derive(Clone, Debug)]
pub struct AttentionPlan {
    scheme: Scheme,
    queries: usize,
    frames: usize,
    pub(crate) masks: Vec<KeyMask>,
    pub(crate) rotary: Option<RotaryLabels>,
}

/// Intermediates of one attention pass.
#[derive(Clone, Debug)]
pub struct PassTrace {
    /// Queries after rotation (equal to the input when unlabeled).
    pub q: Matrix,
    /// Stacked keys after rotation.
    pub k: Matrix,
    pub weights: Matrix,
}

#[derive(Clone, Debug)]
pub struct SchemeOutput {
    pub out: Matrix,
    /// `queries × 2·frames` attention mass per key column; each row sums to 1.
    /// For the add scheme this is the average of its two passes.
    pub routing: Matrix,
    pub passes: Vec<PassTrace>,
}

impl AttentionPlan {
    pub fn new(spec: SchemeSpec<'_>, queries: usize, frames: usize, span: AttentionSpan) -> Result<Self> {
        if frames == 0 {
            return config_err("audio streams must have at least one frame");
        }
        let span_mask = span.mask(queries, frames)?;
        let stream_of = |j: usize| if j < frames { 0 } else { 1 };
        let mut rotary = None;
        let masks = match spec {
            SchemeSpec::Concat => vec![span_mask],
            SchemeSpec::Add => (0..2)
                .map(|s| span_mask.and(&KeyMask::from_fn(queries, 2 * frames, |_, j| stream_of(j) == s)))
                .collect::<Result<_>>()?,
            SchemeSpec::Split { grid, split_col } => {
                if split_col > grid.width {
                    return config_err(format!("split column {split_col} outside 0..={}", grid.width));
                }
                if grid.tokens() != queries {
                    return config_err(format!("split grid has {} tokens, {queries} queries given", grid.tokens()));
                }
                let side = |i: usize| if grid.coords(i).2 < split_col { 0 } else { 1 };
                vec![span_mask.and(&KeyMask::from_fn(queries, 2 * frames, |i, j| side(i) == stream_of(j)))?]
            }
            SchemeSpec::Lrope { label_map, labels, rotary: cfg } => {
                labels.validate()?;
                if label_map.len() != queries {
                    return config_err(format!("label map covers {} tokens, {queries} queries given", label_map.len()));
                }
                rotary = Some(RotaryLabels {
                    query: label_map.labels.clone(),
                    key: LabelVector::constant(frames, labels.audio.0).concat(&LabelVector::constant(frames, labels.audio.1)),
                    cfg: cfg.clone(),
                });
                vec![span_mask]
            }
        };
        Ok(Self {
            scheme: spec.scheme(),
            queries,
            frames,
            masks,
            rotary,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn run(&self, q: &Matrix, keys: &AudioStreamPair, values: &AudioStreamPair) -> Result<SchemeOutput> {
        if q.rows() != self.queries || keys.frames() != self.frames || values.frames() != self.frames {
            return shape_err(
                "AttentionPlan::run",
                format!(
                    "plan for {} queries/{} frames, got {} queries, {}/{} frames",
                    self.queries,
                    self.frames,
                    q.rows(),
                    keys.frames(),
                    values.frames()
                ),
            );
        }
        if q.cols() != keys.dim() {
            return shape_err("AttentionPlan::run", format!("query width {} vs key width {}", q.cols(), keys.dim()));
        }
        let k = keys.stacked();
        let v = values.stacked();
        let (q, k) = match &self.rotary {
            Some(r) => (rotate(q, &r.query, &r.cfg)?, rotate(&k, &r.key, &r.cfg)?),
            None => (q.clone(), k),
        };
        let logits = q.matmul_t(&k)?.scale(1.0 / (q.cols() as f64).sqrt());
        let mut out = Matrix::zeros(q.rows(), v.cols());
        let mut routing = Matrix::zeros(q.rows(), k.rows());
        let mut passes = Vec::with_capacity(self.masks.len());
        let share = 1.0 / self.masks.len() as f64;
        for mask in &self.masks {
            let weights = softmax_rows_masked(&logits, mask)?;
            out.axpy(1.0, &weights.matmul(&v)?)?;
            routing.axpy(share, &weights)?;
            passes.push(PassTrace {
                q: q.clone(),
                k: k.clone(),
                weights,
            });
        }
        Ok(SchemeOutput { out, routing, passes })
    }
}

fn run(
    spec: SchemeSpec<'_>,
    q: &Matrix,
    keys: &AudioStreamPair,
    values: &AudioStreamPair,
    span: AttentionSpan,
) -> Result<SchemeOutput> {
    AttentionPlan::new(spec, q.rows(), keys.frames(), span)?.run(q, keys, values)
}

/// One attention over the concatenation of both streams.
pub fn scheme_concat(q: &Matrix, keys: &AudioStreamPair, values: &AudioStreamPair, span: AttentionSpan) -> Result<SchemeOutput> {
    run(SchemeSpec::Concat, q, keys, values, span)
}

/// Separate attention onto each stream, outputs summed.
pub fn scheme_add(q: &Matrix, keys: &AudioStreamPair, values: &AudioStreamPair, span: AttentionSpan) -> Result<SchemeOutput> {
    run(SchemeSpec::Add, q, keys, values, span)
}

/// Left columns of each frame attend only to stream 1, the rest only to stream 2.
pub fn scheme_split(
    q: &Matrix,
    grid: TokenGrid,
    split_col: usize,
    keys: &AudioStreamPair,
    values: &AudioStreamPair,
    span: AttentionSpan,
) -> Result<SchemeOutput> {
    run(SchemeSpec::Split { grid, split_col }, q, keys, values, span)
}

/// Concatenated streams labeled `c_a1`/`c_a2`, queries labeled by the token label map.
pub fn scheme_lrope(
    q: &Matrix,
    label_map: &TokenLabelMap,
    keys: &AudioStreamPair,
    values: &AudioStreamPair,
    labels: &LabelRangeConfig,
    rotary: &RotaryConfig,
    span: AttentionSpan,
) -> Result<SchemeOutput> {
    run(SchemeSpec::Lrope { label_map, labels, rotary }, q, keys, values, span)
}

/// Attention mass each person puts on its own stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingReport {
    pub scheme: Option<Scheme>,
    pub person1: f64,
    pub person2: f64,
    pub mean: f64,
}

/// Per person, the mean over that person's tokens of the routing mass on
/// the person's own stream. Background tokens are ignored.
pub fn binding_score(routing: &Matrix, truth: &[Category], frames_per_stream: usize) -> Result<BindingReport> {
    if routing.rows() != truth.len() || routing.cols() != 2 * frames_per_stream {
        return shape_err(
            "binding_score",
            format!(
                "routing {:?} vs {} tokens and {} frames per stream",
                routing.shape(),
                truth.len(),
                frames_per_stream
            ),
        );
    }
    let mut scores = [0.0; 2];
    for (p, score) in scores.iter_mut().enumerate() {
        let person = Category::person(p).unwrap();
        let cols = p * frames_per_stream..(p + 1) * frames_per_stream;
        let masses: Vec<f64> = (0..truth.len())
            .filter(|&i| truth[i] == person)
            .map(|i| routing.row(i)[cols.clone()].iter().sum::<f64>())
            .collect();
        if masses.is_empty() {
            return Err(Error::UndefinedScore(format!("no {person} tokens")));
        }
        *score = (masses.iter().sum::<f64>() / masses.len() as f64).clamp(0.0, 1.0);
    }
    Ok(BindingReport {
        scheme: None,
        person1: scores[0],
        person2: scores[1],
        mean: 0.5 * (scores[0] + scores[1]),
    })
}
