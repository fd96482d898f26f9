//! Central finite-difference check of the toy block's analytic gradients.
//!
//! The numeric side only ever calls the forward pass and the loss.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::TokenGrid;
use crate::injection::Scheme;
use crate::localization::{LabelRangeConfig, TokenLabelMap};
use crate::lrope::{LabelVector, RotaryConfig};
use crate::numerics::{Matrix, Rng};
use crate::toy_model::{loss_and_grad, sample_loss, ScenarioConfig, ScenarioKind, SyntheticScenario, ToyBlockParams, PARAM_NAMES};

pub const FD_EPSILON: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Smallest denominator ever used by [`relative_error`].
pub const ABS_FLOOR: f64 = 1e-8;
/// Safety factor on the rounding error of a central difference.
pub const ROUNDOFF_MARGIN: f64 = 16.0;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor.max(ABS_FLOOR))
}

/// [`relative_error_with_floor`] at the smallest floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, ABS_FLOOR)
}

/// Absolute error a central difference of a loss near `loss` can pick up
/// from rounding alone: `ROUNDOFF_MARGIN · ε_mach · max(|loss|, 1) / ε`.
pub fn roundoff_bound(loss: f64) -> f64 {
    ROUNDOFF_MARGIN * f64::EPSILON * loss.abs().max(1.0) / FD_EPSILON
}

/// Denominator floor for a given loss: entries whose absolute error stays
/// under [`roundoff_bound`] cannot fail the relative tolerance.
pub fn relative_floor(loss: f64) -> f64 {
    roundoff_bound(loss) / REL_TOLERANCE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub scheme: Scheme,
    pub seed: u64,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub dim: usize,
    pub tokens: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub cases: Vec<GradCheckCase>,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub dim: usize,
    /// Token layout; the default `1 × 3 × 2` grid has six tokens.
    pub grid: TokenGrid,
    pub configs_per_scheme: usize,
    pub seed: u64,
    pub schemes: Vec<Scheme>,
    pub theta_base: f64,
    /// Adds this offset to every analytic gradient entry; used to confirm
    /// the checker catches a wrong gradient.
    pub sabotage: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            grid: TokenGrid {
                frames: 1,
                height: 3,
                width: 2,
            },
            configs_per_scheme: 20,
            seed: 0,
            schemes: Scheme::ALL.to_vec(),
            theta_base: 1.0,
            sabotage: 0.0,
        }
    }
}

/// Checks one random configuration: random parameters, a random sample and,
/// for lrope, random in-range labels.
pub fn check_case(scheme: Scheme, cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckCase> {
    let mut rng = Rng::new(seed);
    let grid = cfg.grid;
    let scenario_cfg = ScenarioConfig {
        grid,
        dim: cfg.dim,
        audio_dim: 4,
        context: 3,
        adapter_hidden: 8,
        kind: ScenarioKind::Static,
        ..ScenarioConfig::default()
    };
    let scenario = SyntheticScenario::new(scenario_cfg, &mut rng)?;
    let params = ToyBlockParams::init(cfg.dim, 1.0, &mut rng);
    let sample = scenario.sample(&params.frozen_base, &mut rng)?;
    let labels = LabelRangeConfig::default();
    let label_map = TokenLabelMap {
        labels: LabelVector::new(
            scenario
                .truth
                .iter()
                .map(|c| match labels.range(*c) {
                    Some((a, b)) => rng.uniform_range(a, b),
                    None => labels.background,
                })
                .collect(),
        )?,
        categories: scenario.truth.clone(),
    };
    let rotary = RotaryConfig::new(cfg.dim, cfg.theta_base)?;
    let plan = scenario.plan_with(scheme, &rotary, Some(&label_map))?;

    let (loss, grads, _) = loss_and_grad(&params, &sample, &plan)?;
    let floor = relative_floor(loss);
    let mut worst = (0.0, PARAM_NAMES[0]);
    for (which, name) in PARAM_NAMES.iter().enumerate() {
        let analytic = grads.as_array()[which];
        for idx in 0..analytic.as_slice().len() {
            let numeric = {
                let mut plus = params.clone();
                plus.trainable_mut()[which].as_mut_slice()[idx] += FD_EPSILON;
                let mut minus = params.clone();
                minus.trainable_mut()[which].as_mut_slice()[idx] -= FD_EPSILON;
                (sample_loss(&plus, &sample, &plan)? - sample_loss(&minus, &sample, &plan)?) / (2.0 * FD_EPSILON)
            };
            let err = relative_error_with_floor(analytic.as_slice()[idx] + cfg.sabotage, numeric, floor);
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    Ok(GradCheckCase {
        scheme,
        seed,
        max_rel_error: worst.0,
        worst_param: worst.1.to_string(),
    })
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut seeds = Rng::new(cfg.seed);
    let mut cases = Vec::new();
    for &scheme in &cfg.schemes {
        for _ in 0..cfg.configs_per_scheme {
            cases.push(check_case(scheme, cfg, seeds.next_u64())?);
        }
    }
    let max = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        dim: cfg.dim,
        tokens: cfg.grid.tokens(),
        epsilon: FD_EPSILON,
        tolerance: REL_TOLERANCE,
        max_rel_error: max,
        passed: max < REL_TOLERANCE,
        cases,
    })
}

/// Flattened finite-difference gradient of an arbitrary scalar function of a
/// matrix; handy for checking individual kernels.
pub fn numeric_gradient(x: &Matrix, f: impl Fn(&Matrix) -> Result<f64>) -> Result<Matrix> {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.as_slice().len() {
        let mut p = x.clone();
        p.as_mut_slice()[i] += FD_EPSILON;
        let mut m = x.clone();
        m.as_mut_slice()[i] -= FD_EPSILON;
        g.as_mut_slice()[i] = (f(&p)? - f(&m)?) / (2.0 * FD_EPSILON);
    }
    Ok(g)
}
