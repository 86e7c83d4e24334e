//! DP-SGD / DP-Adam training loop: reductions, clipping and noise scale.

use privfed::accountant::{max_steps, Conversion, MechanismParams, PrivacyBudget};
use privfed::data::{synth_blobs, Dataset, SyntheticSpec};
use privfed::nn::{Activation, MlpConfig};
use privfed::optim::{clip_gradient, l2_norm, ClippedSum, DpSpec};
use privfed::rng::StreamRng;
use privfed::train::{train_central, CentralOutcome, CentralSetup, LocalTraining, OptimizerKind, Sampling};
use proptest::prelude::*;
use rand::SeedableRng;

fn blobs(n: usize, d: usize) -> Dataset {
    synth_blobs(&SyntheticSpec { n_samples: n, n_features: d, class_separation: 3.0, noise_std: 1.0 }, 11).unwrap()
}

fn setup(optimizer: OptimizerKind, dp: Option<DpSpec>, lot: usize, epochs: usize) -> CentralSetup {
    CentralSetup {
        model: MlpConfig { input_dim: 4, hidden_dims: vec![8, 8], output_dim: 2, activation: Activation::Tanh },
        training: LocalTraining { optimizer, learning_rate: 0.01, lot_size: lot, sampling: Sampling::Shuffle, dp },
        epochs,
        budget: None,
        conversion: Conversion::Classic,
        seed: 5,
    }
}

fn run(s: &CentralSetup, data: &Dataset) -> CentralOutcome {
    train_central(s, data, &mut |_, _| Ok(()), &mut |_| {}).unwrap()
}

#[test]
fn zero_noise_huge_clip_reduces_to_plain_optimizers() {
    let data = blobs(240, 4);
    let dp = Some(DpSpec::new(1e9, 0.0).unwrap());
    for lot in [1, 16, 240] {
        let plain = run(&setup(OptimizerKind::Sgd, None, lot, 3), &data);
        let private = run(&setup(OptimizerKind::DpSgd, dp, lot, 3), &data);
        assert_eq!(plain.model, private.model, "sgd lot {lot}");
        let plain = run(&setup(OptimizerKind::Adam, None, lot, 3), &data);
        let private = run(&setup(OptimizerKind::DpAdam, dp, lot, 3), &data);
        assert_eq!(plain.model, private.model, "adam lot {lot}");
    }
}

#[test]
fn post_clip_norms_bounded_through_training() {
    let data = blobs(300, 4);
    let s = setup(OptimizerKind::DpSgd, Some(DpSpec::new(0.05, 1.0).unwrap()), 32, 4);
    let mut worst = 0.0f64;
    let mut steps = 0;
    train_central(&s, &data, &mut |_, _| Ok(()), &mut |info| {
        let r = info.report.expect("private step");
        worst = worst.max(r.max_post_clip_norm);
        steps += 1;
    })
    .unwrap();
    assert_eq!(steps, 40);
    assert!(worst <= 0.05 + 1e-12, "{worst}");
}

#[test]
fn noise_std_matches_sigma_clip_over_lot() {
    let spec = DpSpec::new(4.0, 0.8).unwrap();
    let lot = 64;
    let acc = ClippedSum::new(100_000, Some(spec.clip_norm));
    let mut rng = StreamRng::seed_from_u64(99);
    let (noise, _) = acc.privatize(&spec, lot, &mut rng).unwrap();
    let n = noise.len() as f64;
    let mean = noise.iter().sum::<f64>() / n;
    let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let expected = 0.8 * 4.0 / lot as f64;
    assert!((std / expected - 1.0).abs() < 0.02, "{std} vs {expected}");
    assert!(mean.abs() < 4.0 * expected / n.sqrt());
}

#[test]
fn budgeted_run_takes_exactly_max_steps() {
    let data = blobs(400, 4);
    let mut s = setup(OptimizerKind::DpAdam, Some(DpSpec::new(1.0, 1.5).unwrap()), 40, 10_000);
    let budget = PrivacyBudget::new(3.0, 1e-5).unwrap();
    s.budget = Some(budget);
    let mut last_eps = 0.0;
    let out = train_central(
        &s,
        &data,
        &mut |_, summary| {
            let e = summary.epsilon.unwrap();
            assert!(e >= last_eps && e <= 3.0);
            last_eps = e;
            Ok(())
        },
        &mut |_| {},
    )
    .unwrap();
    let predicted = max_steps(&MechanismParams::from_lot(40, 400, 1.5).unwrap(), &budget).unwrap();
    assert_eq!(out.total_steps, predicted);
    assert_eq!(out.max_steps, Some(predicted));
}

#[test]
fn poisson_sampling_trains_and_is_reproducible() {
    let data = blobs(200, 4);
    let mut s = setup(OptimizerKind::DpSgd, Some(DpSpec::new(1.0, 1.0).unwrap()), 20, 2);
    s.training.sampling = Sampling::Poisson;
    let a = run(&s, &data);
    let b = run(&s, &data);
    assert_eq!(a.model, b.model);
    assert_eq!(a.total_steps, 20);
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        g in prop::collection::vec(-1e3f64..1e3, 1..40),
        s in 1e-3f64..100.0,
    ) {
        let c = clip_gradient(&g, s).unwrap();
        let n = l2_norm(&g);
        prop_assert!(l2_norm(&c) <= s + 1e-12 * s.max(1.0));
        if n <= s {
            prop_assert_eq!(&c, &g);
        } else {
            let k = n / s;
            for (a, b) in c.iter().zip(&g) {
                prop_assert!((a * k - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
