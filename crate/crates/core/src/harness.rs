//! Experiment driver behind the command-line tool: configuration, metrics
//! documents, heatmaps and the commands themselves.
//!
//! Everything that lands in `metrics.json` is a pure function of the config,
//! so two runs with the same config are byte-identical. Wall-clock numbers
//! go to `timing.json` instead.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::gradcheck::{self, GradCheckConfig, GradCheckReport};
use crate::grid::TokenGrid;
use crate::injection::{BindingReport, Scheme};
use crate::invariants::{self, InvariantCheck};
use crate::localization::{build_label_map, LabelRangeConfig, RefToVideoAttentionMap, SubjectMaskSet, TokenLabelMap};
use crate::longvideo::{plan_chunks, ChunkPlan};
use crate::lrope::{AngleMode, RotaryConfig};
use crate::numerics::{Matrix, Rng};
use crate::tensor_io::read_matrix;
use crate::toy_model::{forward, train, ScenarioConfig, ScenarioKind, SyntheticScenario, TrainConfig, TrainOutcome};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
    /// Std multiplier of the projection init; 0 gives the symmetric
    /// all-zero start.
    pub init_scale: f64,
    pub i2v_fraction: f64,
    pub eval_samples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            learning_rate: t.learning_rate,
            init_scale: t.init_scale,
            i2v_fraction: t.i2v_fraction,
            eval_samples: t.eval_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub dim: usize,
    pub configs_per_scheme: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        let g = GradCheckConfig::default();
        Self {
            dim: g.dim,
            configs_per_scheme: g.configs_per_scheme,
        }
    }
}

/// One experiment. Every field has a default, so a config file only needs
/// the values it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub audio_dim: usize,
    /// Audio context window `k`.
    pub context: usize,
    pub adapter_hidden: usize,
    pub theta_base: f64,
    pub angle_mode: AngleMode,
    pub labels: LabelRangeConfig,
    pub schemes: Vec<Scheme>,
    pub scenario: ScenarioKind,
    pub swap_frame: usize,
    pub token_noise: f64,
    pub target_gain: f64,
    pub train: TrainSettings,
    pub gradcheck: GradCheckSettings,
    /// Points kept from each training loss curve.
    pub curve_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        Self {
            seed: 0,
            frames: s.grid.frames,
            height: s.grid.height,
            width: s.grid.width,
            dim: s.dim,
            audio_dim: s.audio_dim,
            context: s.context,
            adapter_hidden: s.adapter_hidden,
            theta_base: TrainConfig::default().theta_base,
            angle_mode: AngleMode::Linear,
            labels: s.labels,
            schemes: Scheme::ALL.to_vec(),
            scenario: s.kind,
            swap_frame: s.swap_frame,
            token_noise: s.token_noise,
            target_gain: s.target_gain,
            train: TrainSettings::default(),
            gradcheck: GradCheckSettings::default(),
            curve_points: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            grid: TokenGrid {
                frames: self.frames,
                height: self.height,
                width: self.width,
            },
            dim: self.dim,
            audio_dim: self.audio_dim,
            context: self.context,
            adapter_hidden: self.adapter_hidden,
            kind: self.scenario,
            swap_frame: self.swap_frame,
            labels: self.labels,
            token_noise: self.token_noise,
            target_gain: self.target_gain,
        }
    }

    pub fn train_config(&self, scheme: Scheme) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            steps: self.train.steps,
            seed: self.seed,
            scheme,
            i2v_fraction: self.train.i2v_fraction,
            theta_base: self.theta_base,
            angle_mode: self.angle_mode,
            init_scale: self.train.init_scale,
            eval_samples: self.train.eval_samples,
        }
    }

    pub fn gradcheck_config(&self) -> GradCheckConfig {
        GradCheckConfig {
            dim: self.gradcheck.dim,
            configs_per_scheme: self.gradcheck.configs_per_scheme,
            seed: self.seed,
            schemes: self.schemes.clone(),
            theta_base: self.theta_base,
            ..GradCheckConfig::default()
        }
    }

    /// Checks every derived module config; no command computes anything
    /// before this passes.
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return config_err("scheme list is empty");
        }
        if self.schemes.iter().collect::<BTreeSet<_>>().len() != self.schemes.len() {
            return config_err("scheme list has duplicates");
        }
        self.scenario_config().validate()?;
        self.train_config(Scheme::Lrope).validate()?;
        RotaryConfig::with_mode(self.dim, self.theta_base, self.angle_mode)?;
        if self.gradcheck.dim == 0 || !self.gradcheck.dim.is_multiple_of(2) {
            return config_err(format!("gradient-check width must be even and positive, got {}", self.gradcheck.dim));
        }
        RotaryConfig::new(self.gradcheck.dim, self.theta_base)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeMetrics {
    pub scheme: Scheme,
    pub binding_before: BindingReport,
    pub binding: BindingReport,
    pub eval_loss_before: f64,
    pub eval_loss_after: f64,
    pub loss_curve: Vec<LossPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeGradCheck {
    pub scheme: Scheme,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub dim: usize,
    pub cases: usize,
    pub tolerance: f64,
    pub per_scheme: Vec<SchemeGradCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckSummary {
    pub fn from_report(r: &GradCheckReport, schemes: &[Scheme]) -> Self {
        let per_scheme = schemes
            .iter()
            .map(|&scheme| SchemeGradCheck {
                scheme,
                max_rel_error: r
                    .cases
                    .iter()
                    .filter(|c| c.scheme == scheme)
                    .map(|c| c.max_rel_error)
                    .fold(0.0, f64::max),
            })
            .collect();
        Self {
            dim: r.dim,
            cases: r.cases.len(),
            tolerance: r.tolerance,
            per_scheme,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub schemes: Vec<SchemeMetrics>,
    pub gradcheck: GradCheckSummary,
    pub invariants: Vec<InvariantCheck>,
    pub invariants_passed: bool,
}

impl MetricsReport {
    pub fn scheme(&self, s: Scheme) -> Option<&SchemeMetrics> {
        self.schemes.iter().find(|m| m.scheme == s)
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if r.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported metrics schema version {}", r.schema_version)));
        }
        Ok(r)
    }
}

/// Wall-clock seconds, kept apart from the metrics.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_scheme_seconds: Vec<(Scheme, f64)>,
    pub gradcheck_seconds: f64,
    pub invariants_seconds: f64,
}

/// `n` evenly spaced points of the curve, always including the first and last step.
pub fn subsample_curve(losses: &[f64], n: usize) -> Vec<LossPoint> {
    if losses.is_empty() || n == 0 {
        return Vec::new();
    }
    let last = losses.len() - 1;
    let picks: BTreeSet<usize> = if n == 1 {
        BTreeSet::from([last])
    } else {
        (0..n).map(|i| i * last / (n - 1)).collect()
    };
    picks.into_iter().map(|step| LossPoint { step, loss: losses[step] }).collect()
}

/// Plain (P2) PGM. `lo` maps to 0 and `hi` to 255, linearly and clamped.
pub fn encode_pgm(values: &Matrix, lo: f64, hi: f64, comment: &str) -> Result<String> {
    if hi <= lo || !lo.is_finite() || !hi.is_finite() {
        return config_err(format!("heatmap range [{lo}, {hi}] is empty"));
    }
    let mut s = String::from("P2\n");
    for line in comment.lines() {
        writeln!(s, "# {line}").unwrap();
    }
    writeln!(s, "{} {}\n255", values.cols(), values.rows()).unwrap();
    for r in 0..values.rows() {
        let row: Vec<String> = values
            .row(r)
            .iter()
            .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round().to_string())
            .collect();
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    Ok(s)
}

fn write_out(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, bytes)?;
    Ok(path)
}

fn attention_heatmap(outcome: &TrainOutcome, scenario: &SyntheticScenario, cfg: &ExperimentConfig, scheme: Scheme) -> Result<String> {
    let rotary = cfg.train_config(scheme).rotary(cfg.dim)?;
    let plan = scenario.plan(scheme, &rotary)?;
    let mut probe = Rng::new(cfg.seed.wrapping_add(1));
    let sample = scenario.sample(&outcome.params.frozen_base, &mut probe)?;
    let cache = forward(&outcome.params, &sample.z, &sample.audio, &plan)?;
    encode_pgm(
        &cache.routing,
        0.0,
        1.0,
        &format!(
            "{scheme} routing after training: rows are video tokens (frame, row, col order), \
             columns are stream 1 frames then stream 2 frames\nlinear map [0, 1] -> [0, 255]"
        ),
    )
}

/// Trains every requested scheme from the same seed on one scenario, runs
/// the gradient check and the invariant suite, and writes `metrics.json`,
/// `timing.json`, one `attention_<scheme>.pgm` and one `params_<scheme>.bin`
/// per scheme into `out`.
pub fn cmd_schemes_compare(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let started = Instant::now();
    let scenario = SyntheticScenario::new(cfg.scenario_config(), &mut Rng::new(cfg.seed))?;

    let trained: Vec<(Scheme, Result<TrainOutcome>, f64)> = thread::scope(|s| {
        let handles: Vec<_> = cfg
            .schemes
            .iter()
            .map(|&scheme| {
                let scenario = &scenario;
                s.spawn(move || {
                    let t = Instant::now();
                    let r = train(&cfg.train_config(scheme), scenario);
                    (scheme, r, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });

    let mut schemes = Vec::new();
    let mut timing = Timing::default();
    let mut files = Vec::new();
    for (scheme, outcome, secs) in trained {
        let outcome = outcome.map_err(|e| match e {
            Error::Diverged { .. } => Error::Config(format!("{scheme}: {e}")),
            other => other,
        })?;
        timing.per_scheme_seconds.push((scheme, secs));
        files.push((format!("attention_{scheme}.pgm"), attention_heatmap(&outcome, &scenario, cfg, scheme)?.into_bytes()));
        files.push((format!("params_{scheme}.bin"), outcome.params.to_bytes()?));
        schemes.push(SchemeMetrics {
            scheme,
            binding_before: outcome.binding_before,
            binding: outcome.binding,
            eval_loss_before: outcome.eval_loss_before,
            eval_loss_after: outcome.eval_loss_after,
            loss_curve: subsample_curve(&outcome.losses, cfg.curve_points),
        });
    }

    let t = Instant::now();
    let gc = gradcheck::run(&cfg.gradcheck_config())?;
    timing.gradcheck_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let invariants = invariants::run_suite(cfg.seed)?;
    timing.invariants_seconds = t.elapsed().as_secs_f64();

    let report = MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        config: cfg.clone(),
        schemes,
        gradcheck: GradCheckSummary::from_report(&gc, &cfg.schemes),
        invariants_passed: invariants.iter().all(|c| c.passed),
        invariants,
    };
    timing.total_seconds = started.elapsed().as_secs_f64();

    write_out(out, METRICS_FILE, report.to_json()?)?;
    for (name, bytes) in files {
        write_out(out, &name, bytes)?;
    }
    write_out(
        out,
        TIMING_FILE,
        serde_json::to_string_pretty(&timing).map_err(|e| Error::Parse(e.to_string()))? + "\n",
    )?;
    Ok(report)
}

/// Reads a `tokens × (h·w)` attention matrix and a mask grid, writes
/// `label_map.txt` and a `labels.pgm` with one pixel per video token
/// (`f·h` rows of `w`).
pub fn cmd_localize(attention: &Path, masks: &Path, labels: &LabelRangeConfig, out: &Path) -> Result<TokenLabelMap> {
    labels.validate()?;
    let masks: SubjectMaskSet = fs::read_to_string(masks)?.parse()?;
    let (h, w) = (masks.height(), masks.width());
    let a = RefToVideoAttentionMap::from_matrix(read_matrix(attention)?, h, w)?;
    let (f, _, _) = a.dims();
    let map = build_label_map(&a, &masks, labels)?;

    let all = [labels.person1.0, labels.person1.1, labels.person2.0, labels.person2.1, labels.background];
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = Matrix::new(f * h, w, map.labels.as_slice().to_vec())?;
    let pgm = encode_pgm(
        &pixels,
        lo,
        hi,
        &format!("token labels, {f} frames of {h}x{w} stacked vertically\nlinear map [{lo}, {hi}] -> [0, 255]"),
    )?;
    write_out(out, "label_map.txt", map.to_text(f, h, w)?)?;
    write_out(out, "labels.pgm", pgm)?;
    Ok(map)
}

/// Runs the finite-difference suite and writes `gradcheck.json`.
pub fn cmd_gradcheck(cfg: &GradCheckConfig, out: &Path) -> Result<GradCheckReport> {
    if cfg.dim == 0 || !cfg.dim.is_multiple_of(2) {
        return config_err(format!("gradient-check width must be even and positive, got {}", cfg.dim));
    }
    if cfg.schemes.is_empty() || cfg.configs_per_scheme == 0 {
        return config_err("gradient check needs at least one scheme and one configuration");
    }
    RotaryConfig::new(cfg.dim, cfg.theta_base)?;
    let report = gradcheck::run(cfg)?;
    write_out(
        out,
        "gradcheck.json",
        serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))? + "\n",
    )?;
    Ok(report)
}

/// Writes `chunk_plan.txt`.
pub fn cmd_plan_chunks(total: usize, chunk_len: usize, out: &Path) -> Result<ChunkPlan> {
    let plan = plan_chunks(total, chunk_len)?;
    write_out(out, "chunk_plan.txt", plan.to_text())?;
    Ok(plan)
}
