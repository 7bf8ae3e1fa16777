use flownet::bounds::{
    evaluate_bounds, growth, lower_bound, region_map, upper_bound, window_growth, CompactGrid, TimeSampling,
};
use flownet::experiments::{example1_net, SamplingLaw};
use flownet::flow::ActivationSpec;
use flownet::linalg::spectral_norm;
use flownet::nets::{AnyNet, Arch, NormConstraint};
use flownet::spectral::{delta_star, stabilize, OmegaBox};
use flownet::training::{
    accuracy, attack_curve, default_etas, gen_sine, gen_two_moons, parse_csv, parse_idx_images, parse_idx_labels,
    sine_test_set, to_csv, train, TrainConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn leaky() -> ActivationSpec {
    ActivationSpec::leaky_relu(0.1).unwrap()
}

#[test]
fn sine_flow_net_learns() {
    let train_set = gen_sine(500, 3);
    let test = sine_test_set();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = AnyNet::init(Arch::Flow, 1, 50, 1, leaky(), 20, &mut rng).unwrap();
    let cfg = TrainConfig {
        seed: 3,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let h = train(&mut net, &train_set, Some(&test), &cfg).unwrap();
    assert!(h.final_test_loss() < 0.1 * h.initial_test_loss);
    assert!(h.best_test_loss() < h.initial_test_loss);
}

#[test]
fn training_is_deterministic() {
    let data = gen_two_moons(200, 0.1, 5);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = AnyNet::init(Arch::TwoHidden, 2, 6, 2, leaky(), 20, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch: Some(32),
            seed: 5,
            ..TrainConfig::default()
        };
        let h = train(&mut net, &data, None, &cfg).unwrap();
        (net, h.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn constrained_training_keeps_norms() {
    let data = gen_two_moons(200, 0.1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = AnyNet::init(Arch::Flow, 2, 4, 2, leaky(), 20, &mut rng).unwrap();
    let constraint = NormConstraint::new(2.0, 1.0).unwrap();
    for round in 0..5 {
        let cfg = TrainConfig {
            epochs: 10,
            seed: round,
            constraint: Some(constraint),
            ..TrainConfig::default()
        };
        train(&mut net, &data, None, &cfg).unwrap();
        let f = net.as_flow().unwrap();
        assert!((spectral_norm(f.a1()) - 2.0).abs() <= 1e-8);
        assert!((spectral_norm(f.a2()) - 1.0).abs() <= 1e-8);
    }
}

#[test]
fn frozen_ode_is_unchanged() {
    let data = gen_two_moons(200, 0.1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = AnyNet::init(Arch::Flow, 2, 4, 2, leaky(), 20, &mut rng).unwrap();
    let before = net.as_flow().unwrap().ode.clone();
    let l1_before = net.as_flow().unwrap().l1.clone();
    let cfg = TrainConfig {
        epochs: 20,
        freeze_ode: true,
        ..TrainConfig::default()
    };
    train(&mut net, &data, None, &cfg).unwrap();
    assert_eq!(net.as_flow().unwrap().ode, before);
    assert_ne!(net.as_flow().unwrap().l1, l1_before);
}

#[test]
fn attack_at_zero_is_clean_accuracy() {
    let data = gen_two_moons(300, 0.1, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = AnyNet::init(Arch::Flow, 2, 4, 2, leaky(), 20, &mut rng).unwrap();
    train(&mut net, &data, None, &TrainConfig { epochs: 200, ..TrainConfig::default() }).unwrap();
    let report = attack_curve(&net, &data, &default_etas()).unwrap();
    assert_eq!(report.accuracy[0], accuracy(&net, &data).unwrap());
    assert!(report.to_csv().starts_with("eta,accuracy\n"));
}

#[test]
fn csv_and_idx_round_trips() {
    let data = gen_sine(20, 1);
    assert_eq!(parse_csv(&to_csv(&data)).unwrap().inputs, data.inputs);
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1];
    images.extend([0, 255, 51, 102]);
    let m = parse_idx_images(&images).unwrap();
    assert_eq!(m.shape(), (2, 2));
    assert_eq!(m.row(0), &[0.0, 1.0]);
    assert_eq!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap(), vec![7, 3]);
    assert!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 3]).is_err());
}

proptest! {
    #[test]
    fn growth_series_control(d in -0.1f64..0.1) {
        // rounding of g near 1 contributes a few ulps on top of δ²
        prop_assert!((growth(d) - 1.0 - d / 2.0).abs() <= d * d + 4.0 * f64::EPSILON);
    }

    #[test]
    fn bound_limits_are_continuous(d in 1e-9f64..1e-6, tbar in 0.05f64..0.95) {
        prop_assert!((upper_bound(0.0, 1.0, 1.0, d) - upper_bound(0.0, 1.0, 1.0, 0.0)).abs() <= 1e-6);
        prop_assert!((window_growth(d, tbar) - (1.0 - tbar)).abs() <= 1e-6);
        prop_assert!((lower_bound(0.0, 1.0, 1.0, -d, tbar, 0.0) - (1.0 - tbar)).abs() <= 1e-6);
    }

    #[test]
    fn upper_bound_increases_with_delta(d1 in -2.0f64..2.0, gap in 0.0f64..1.0, c in 0.0f64..5.0) {
        prop_assert!(upper_bound(0.0, c, 1.0, d1) <= upper_bound(0.0, c, 1.0, d1 + gap) + 1e-15);
    }
}

#[test]
fn bounds_hold_on_example_instances() {
    let omega = OmegaBox::new(2, 0.1).unwrap();
    let grid = CompactGrid::parse("box=-1,1,-1,1;h=0.25").unwrap();
    for law in [SamplingLaw::Uniform, SamplingLaw::Normal] {
        for seed in 20..24 {
            let net = example1_net(law, seed, leaky(), 20).unwrap();
            let dstar = delta_star(net.ode.a(), &omega).unwrap().value;
            let bar = net.stabilized(&stabilize(net.ode.a(), &omega, dstar - 0.05).unwrap()).unwrap();
            let report = evaluate_bounds(None, &net, &bar, &grid, 0.1, 0.3).unwrap();
            assert!(report.upper_violations.is_empty() && report.lower_violations.is_empty());
            assert!(report.empirical_sup <= report.upper_value);
            assert_eq!(report.epsilon, 0.0);
            let map = region_map(&net, &bar, &grid, &omega, &TimeSampling::region_default()).unwrap();
            let again = region_map(&net, &bar, &grid, &omega, &TimeSampling::region_default()).unwrap();
            assert_eq!(map, again);
        }
    }
}
