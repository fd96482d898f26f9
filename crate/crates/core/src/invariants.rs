//! Fast seeded property checks that every metrics report carries.

use serde::{Deserialize, Serialize};

use crate::audio::{adapter_forward, compressed_frames, AdapterParams, AudioEmbeddingSequence};
use crate::error::Result;
use crate::injection::{scheme_concat, scheme_lrope, AttentionSpan, AudioStreamPair};
use crate::localization::{Category, LabelRangeConfig, TokenLabelMap};
use crate::longvideo::{latent_arithmetic, plan_chunks};
use crate::lrope::{rotate, LabelVector, RotaryConfig};
use crate::numerics::{dot, Rng};

/// Tolerance for the rotary identities.
pub const ROTARY_TOLERANCE: f64 = 1e-8;
/// Tolerance for the small-angle limit of the labelled scheme.
pub const CONTINUITY_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed error, or the number of failing cases for exact checks.
    pub worst: f64,
    pub tolerance: f64,
}

impl InvariantCheck {
    fn within(name: &str, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: worst < tolerance,
            worst,
            tolerance,
        }
    }

    fn exact(name: &str, failures: usize) -> Self {
        Self {
            name: name.to_string(),
            passed: failures == 0,
            worst: failures as f64,
            tolerance: 0.0,
        }
    }
}

/// Worst errors of norm preservation, relative-label invariance and
/// composition over `draws` random vectors and labels.
pub fn rotary_errors(draws: usize, dim: usize, theta_base: f64, seed: u64) -> Result<[f64; 3]> {
    let cfg = RotaryConfig::new(dim, theta_base)?;
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 3];
    let one = |l: f64| LabelVector::constant(1, l);
    for _ in 0..draws {
        let q = rng.normal_matrix(1, dim, 1.0);
        let k = rng.normal_matrix(1, dim, 1.0);
        let (a, b, s) = (rng.uniform_range(-30.0, 30.0), rng.uniform_range(-30.0, 30.0), rng.uniform_range(-30.0, 30.0));

        let rq = rotate(&q, &one(a), &cfg)?;
        worst[0] = worst[0].max((rq.frobenius_norm() - q.frobenius_norm()).abs());

        let base = dot(rq.row(0), rotate(&k, &one(b), &cfg)?.row(0));
        let shifted = dot(
            rotate(&q, &one(a + s), &cfg)?.row(0),
            rotate(&k, &one(b + s), &cfg)?.row(0),
        );
        worst[1] = worst[1].max((base - shifted).abs());

        let twice = rotate(&rq, &one(b), &cfg)?;
        worst[2] = worst[2].max(twice.max_abs_diff(&rotate(&q, &one(a + b), &cfg)?));
    }
    Ok(worst)
}

/// Max abs difference between the labelled and plain one-pass schemes at a
/// tiny `theta_base`, on random inputs with in-range labels.
pub fn small_angle_gap(theta_base: f64, seed: u64) -> Result<f64> {
    let (d, tokens, frames) = (16, 12, 3);
    let mut rng = Rng::new(seed);
    let q = rng.normal_matrix(tokens, d, 1.0);
    let keys = AudioStreamPair::new(rng.normal_matrix(frames, d, 1.0), rng.normal_matrix(frames, d, 1.0))?;
    let values = AudioStreamPair::new(rng.normal_matrix(frames, d, 1.0), rng.normal_matrix(frames, d, 1.0))?;
    let labels = LabelRangeConfig::default();
    let categories: Vec<Category> = (0..tokens).map(|i| Category::ALL[i % 3]).collect();
    let map = TokenLabelMap {
        labels: LabelVector::new(
            categories
                .iter()
                .map(|&c| match labels.range(c) {
                    Some((a, b)) => rng.uniform_range(a, b),
                    None => labels.background,
                })
                .collect(),
        )?,
        categories,
    };
    let rot = RotaryConfig::new(d, theta_base)?;
    let plain = scheme_concat(&q, &keys, &values, AttentionSpan::Global)?;
    let labelled = scheme_lrope(&q, &map, &keys, &values, &labels, &rot, AttentionSpan::Global)?;
    Ok(plain.out.max_abs_diff(&labelled.out))
}

/// Totals in `1..=max_total` whose plan fails to cover every frame exactly
/// once after dropping overlaps, or whose consecutive chunks do not overlap
/// by five frames.
pub fn chunk_coverage_failures(max_total: usize, chunk_len: usize) -> Result<usize> {
    let mut failures = 0;
    for total in 1..=max_total {
        let plan = plan_chunks(total, chunk_len)?;
        let covered = plan.stitched_frames() == (1..=total).collect::<Vec<_>>();
        let overlaps = plan.chunks.windows(2).all(|w| w[0].end + 1 - w[1].start == 5);
        if !covered || !overlaps {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Input lengths in `1..=max_len` for which the adapter output length breaks
/// `1 + ceil((l − 1)/4)`.
pub fn adapter_shape_failures(max_len: usize, seed: u64) -> Result<usize> {
    let mut rng = Rng::new(seed);
    let params = AdapterParams::random(5, 4, 6, 3, &mut rng);
    let mut failures = 0;
    for l in 1..=max_len {
        let seq = AudioEmbeddingSequence::synthetic(l, 4, &mut rng)?;
        let out = adapter_forward(&seq, 5, &params)?;
        let expect = 1 + (l - 1).div_ceil(4);
        if out.latent_frames() != expect || compressed_frames(l) != expect || out.dim() != 3 {
            failures += 1;
        }
    }
    Ok(failures)
}

/// The full suite; cheap enough to run inside every experiment.
pub fn run_suite(seed: u64) -> Result<Vec<InvariantCheck>> {
    let [norm, relative, compose] = rotary_errors(100, 16, 1.0, seed)?;
    Ok(vec![
        InvariantCheck::within("rotary_norm_preservation", norm, ROTARY_TOLERANCE),
        InvariantCheck::within("rotary_relative_label", relative, ROTARY_TOLERANCE),
        InvariantCheck::within("rotary_composition", compose, ROTARY_TOLERANCE),
        InvariantCheck::within("lrope_small_angle_limit", small_angle_gap(1e-6, seed)?, CONTINUITY_TOLERANCE),
        InvariantCheck::exact("chunk_coverage", chunk_coverage_failures(1000, 81)?),
        InvariantCheck::exact("latent_overlap_frames", usize::from(latent_arithmetic(5) != 2)),
        InvariantCheck::exact("adapter_shape_law", adapter_shape_failures(500, seed)?),
    ])
}
