use lrope_core::injection::{binding_score, scheme_concat, scheme_lrope, scheme_split, AttentionSpan, AudioStreamPair, Scheme};
use lrope_core::localization::{Category, LabelRangeConfig, TokenLabelMap};
use lrope_core::lrope::{LabelVector, RotaryConfig};
use lrope_core::numerics::scaled_dot_attention;
use lrope_core::toy_model::{forward, train, ScenarioConfig, ScenarioKind, SyntheticScenario, ToyBlockParams, TrainConfig};
use lrope_core::{Matrix, Rng, TokenGrid};

fn swap_scenario() -> SyntheticScenario {
    let cfg = ScenarioConfig {
        kind: ScenarioKind::Swap,
        ..ScenarioConfig::default()
    };
    SyntheticScenario::new(cfg, &mut Rng::new(5)).unwrap()
}

/// Queries equal to their own frame's key, both streams identical: the only
/// thing telling the streams apart is the label.
fn identical_content(grid: TokenGrid, d: usize, seed: u64) -> (Matrix, AudioStreamPair) {
    let mut rng = Rng::new(seed);
    let k = rng.normal_matrix(grid.frames, d, 1.0);
    let q = Matrix::from_fn(grid.tokens(), d, |i, c| k[(grid.coords(i).0, c)]);
    (q, AudioStreamPair::new(k.clone(), k).unwrap())
}

fn oracle_labels(truth: &[Category], cfg: &LabelRangeConfig) -> TokenLabelMap {
    let labels = truth
        .iter()
        .map(|c| match c {
            Category::Person1 => cfg.audio.0,
            Category::Person2 => cfg.audio.1,
            Category::Background => cfg.background,
        })
        .collect();
    TokenLabelMap {
        labels: LabelVector::new(labels).unwrap(),
        categories: truth.to_vec(),
    }
}

#[test]
fn split_output_order_survives_gather_and_scatter() {
    let grid = TokenGrid::new(3, 2, 4).unwrap();
    let mut rng = Rng::new(1);
    let q = rng.normal_matrix(grid.tokens(), 6, 1.0);
    let k = AudioStreamPair::new(rng.normal_matrix(3, 6, 1.0), rng.normal_matrix(3, 6, 1.0)).unwrap();
    let v = AudioStreamPair::new(rng.normal_matrix(3, 2, 1.0), rng.normal_matrix(3, 2, 1.0)).unwrap();
    let got = scheme_split(&q, grid, 2, &k, &v, AttentionSpan::Global).unwrap();

    // Gather left tokens then right tokens, attend per half, scatter back.
    let (left, right): (Vec<usize>, Vec<usize>) = (0..grid.tokens()).partition(|&i| grid.coords(i).2 < 2);
    let (ol, _) = scaled_dot_attention(&q.select_rows(&left).unwrap(), k.stream1(), v.stream1()).unwrap();
    let (or, _) = scaled_dot_attention(&q.select_rows(&right).unwrap(), k.stream2(), v.stream2()).unwrap();
    let stacked = Matrix::vstack(&ol, &or).unwrap();
    let order: Vec<usize> = left.iter().chain(&right).copied().collect();
    let mut inverse = vec![0; order.len()];
    for (pos, &token) in order.iter().enumerate() {
        inverse[token] = pos;
    }
    assert!(stacked.select_rows(&inverse).unwrap().max_abs_diff(&got.out) < 1e-12);
}

#[test]
fn split_on_swap_scenario_binds_person_one_to_the_wrong_stream() {
    let s = swap_scenario();
    let mut rng = Rng::new(2);
    let p = ToyBlockParams::init(16, 1.0, &mut rng);
    let sample = s.sample(&p.frozen_base, &mut rng).unwrap();
    let plan = s.plan(Scheme::Split, &RotaryConfig::new(16, 1.0).unwrap()).unwrap();
    let cache = forward(&p, &sample.z, &sample.audio, &plan).unwrap();
    let r = binding_score(&cache.routing, &s.truth, s.grid().frames).unwrap();

    // Direct count: fraction of person-1 tokens sitting in the left half.
    let g = s.grid();
    let p1: Vec<usize> = (0..g.tokens()).filter(|&i| s.truth[i] == Category::Person1).collect();
    let left = p1.iter().filter(|&&i| g.coords(i).2 < s.split_col()).count();
    assert_eq!(r.person1, left as f64 / p1.len() as f64);
    assert_eq!(r.person1, 0.25);
    assert!(r.person1 < 0.5);
}

#[test]
fn lrope_at_zero_theta_is_concat() {
    let mut rng = Rng::new(3);
    let q = rng.normal_matrix(8, 8, 1.0);
    let k = AudioStreamPair::new(rng.normal_matrix(4, 8, 1.0), rng.normal_matrix(4, 8, 1.0)).unwrap();
    let v = AudioStreamPair::new(rng.normal_matrix(4, 8, 1.0), rng.normal_matrix(4, 8, 1.0)).unwrap();
    let cfg = LabelRangeConfig::default();
    let truth: Vec<Category> = (0..8).map(|i| Category::ALL[i % 3]).collect();
    let map = oracle_labels(&truth, &cfg);
    let rot = RotaryConfig::new(8, 0.0).unwrap();
    let a = scheme_concat(&q, &k, &v, AttentionSpan::Global).unwrap();
    let b = scheme_lrope(&q, &map, &k, &v, &cfg, &rot, AttentionSpan::Global).unwrap();
    assert!(a.out.max_abs_diff(&b.out) < 1e-9);
}

#[test]
fn matching_label_never_loses_mass_to_concat() {
    let grid = TokenGrid::new(4, 2, 2).unwrap();
    let cfg = LabelRangeConfig::default();
    let span = AttentionSpan::PerFrame {
        tokens_per_frame: grid.tokens_per_frame(),
    };
    for seed in 0..10 {
        let (q, keys) = identical_content(grid, 16, seed);
        let map = TokenLabelMap {
            labels: LabelVector::constant(grid.tokens(), cfg.audio.0),
            categories: vec![Category::Person1; grid.tokens()],
        };
        let rot = RotaryConfig::new(16, 1.0).unwrap();
        let plain = scheme_concat(&q, &keys, &keys, span).unwrap();
        let labelled = scheme_lrope(&q, &map, &keys, &keys, &cfg, &rot, span).unwrap();
        for i in 0..grid.tokens() {
            let mass = |w: &Matrix| w.row(i)[..grid.frames].iter().sum::<f64>();
            assert!(mass(&labelled.routing) >= mass(&plain.routing) - 1e-12);
        }
    }
}

#[test]
fn oracle_labels_beat_split_on_swap() {
    let s = swap_scenario();
    let g = s.grid();
    let cfg = s.config.labels;
    let (q, keys) = identical_content(g, 16, 9);
    let map = oracle_labels(&s.truth, &cfg);
    let rot = RotaryConfig::new(16, 1.0).unwrap();
    let lr = scheme_lrope(&q, &map, &keys, &keys, &cfg, &rot, s.span()).unwrap();
    let sp = scheme_split(&q, g, s.split_col(), &keys, &keys, s.span()).unwrap();
    let a = binding_score(&lr.routing, &s.truth, g.frames).unwrap();
    let b = binding_score(&sp.routing, &s.truth, g.frames).unwrap();
    assert!(a.person1 > b.person1 && a.person2 > b.person2, "{a:?} vs {b:?}");
}

#[test]
fn full_weight_rows_are_distributions() {
    let mut rng = Rng::new(4);
    let s = swap_scenario();
    let cfg = s.config.labels;
    let q = rng.normal_matrix(s.truth.len(), 16, 1.0);
    let k = AudioStreamPair::new(rng.normal_matrix(4, 16, 1.0), rng.normal_matrix(4, 16, 1.0)).unwrap();
    let rot = RotaryConfig::new(16, 1.0).unwrap();
    for span in [AttentionSpan::Global, s.span()] {
        for out in [
            scheme_concat(&q, &k, &k, span).unwrap(),
            scheme_lrope(&q, &s.label_map, &k, &k, &cfg, &rot, span).unwrap(),
        ] {
            let f = s.grid().frames;
            let r = binding_score(&out.routing, &s.truth, f).unwrap();
            let p1: Vec<usize> = (0..s.truth.len()).filter(|&i| s.truth[i] == Category::Person1).collect();
            let wrong = p1.iter().map(|&i| out.routing.row(i)[f..].iter().sum::<f64>()).sum::<f64>() / p1.len() as f64;
            assert!((r.person1 + wrong - 1.0).abs() < 1e-9);
            for i in 0..out.routing.rows() {
                assert!((out.routing.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!(out.out.is_finite());
            assert_eq!(out.out.shape(), q.shape());
        }
    }
}

#[test]
fn every_scheme_fits_the_static_layout() {
    let s = SyntheticScenario::new(ScenarioConfig::default(), &mut Rng::new(6)).unwrap();
    for scheme in Scheme::ALL {
        let cfg = TrainConfig {
            scheme,
            steps: 500,
            ..TrainConfig::default()
        };
        let o = train(&cfg, &s).unwrap();
        assert!(o.eval_loss_after < o.eval_loss_before, "{scheme}: {} -> {}", o.eval_loss_before, o.eval_loss_after);
        assert_eq!(o.params.frozen_base, o.initial.frozen_base);
    }
}
