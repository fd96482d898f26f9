//! Shared fixtures for the criterion benchmarks in `benches/`.

use lrope_core::injection::AudioStreamPair;
use lrope_core::toy_model::{Sample, ScenarioConfig, ScenarioKind, SyntheticScenario, ToyBlockParams};
use lrope_core::{Matrix, Rng};

/// Random queries and a random stream pair.
pub fn attention_inputs(tokens: usize, frames: usize, d: usize, seed: u64) -> (Matrix, AudioStreamPair) {
    let mut rng = Rng::new(seed);
    let q = rng.normal_matrix(tokens, d, 1.0);
    let pair = AudioStreamPair::new(rng.normal_matrix(frames, d, 1.0), rng.normal_matrix(frames, d, 1.0))
        .expect("streams share a shape");
    (q, pair)
}

/// Default swap scenario with initial parameters and one sample.
pub fn toy_setup(seed: u64) -> (SyntheticScenario, ToyBlockParams, Sample) {
    let mut rng = Rng::new(seed);
    let cfg = ScenarioConfig {
        kind: ScenarioKind::Swap,
        ..ScenarioConfig::default()
    };
    let scenario = SyntheticScenario::new(cfg, &mut rng).expect("default scenario is valid");
    let params = ToyBlockParams::init(scenario.config.dim, 0.5, &mut rng);
    let sample = scenario.sample(&params.frozen_base, &mut rng).expect("sample");
    (scenario, params, sample)
}
