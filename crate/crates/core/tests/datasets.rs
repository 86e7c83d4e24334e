//! Dataset plumbing: split coverage, CSV round trips, generator statistics.

use privfed::data::{load_csv, normalize_apply, normalize_fit, save_csv, split, synth_blobs, Dataset, SplitSpec, SyntheticSpec};
use privfed::nn::Matrix;
use proptest::prelude::*;

fn indexed(n: usize) -> Dataset {
    // feature 0 carries the row index so splits can be traced back
    let data: Vec<f64> = (0..n).flat_map(|i| [i as f64, 0.5]).collect();
    Dataset::new(Matrix::new(n, 2, data).unwrap(), (0..n).map(|i| i % 2).collect(), "idx").unwrap()
}

fn ids(d: &Dataset) -> Vec<usize> {
    (0..d.len()).map(|i| d.features.get(i, 0) as usize).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_deterministic_disjoint_and_covering(n in 5usize..2000, seed in any::<u64>()) {
        let d = indexed(n);
        let (a, b, c) = split(&d, &SplitSpec::default(), seed).unwrap();
        prop_assert_eq!(a.len(), (0.6 * n as f64).floor() as usize);
        prop_assert_eq!(b.len(), (0.2 * n as f64).floor() as usize);
        let mut all: Vec<usize> = [ids(&a), ids(&b), ids(&c)].concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let (a2, _, _) = split(&d, &SplitSpec::default(), seed).unwrap();
        prop_assert_eq!(ids(&a), ids(&a2));
    }

    #[test]
    fn csv_round_trip_is_exact(
        rows in prop::collection::vec((prop::collection::vec(-1e300f64..1e300, 3), 0usize..4), 1..30),
        tiny in prop::collection::vec(-1e-300f64..1e-300, 3),
    ) {
        let mut data: Vec<f64> = rows.iter().flat_map(|(f, _)| f.clone()).collect();
        data.extend(&tiny);
        let mut labels: Vec<usize> = rows.iter().map(|(_, y)| *y).collect();
        labels.push(1);
        let d = Dataset::new(Matrix::new(labels.len(), 3, data).unwrap(), labels, "p").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&d, &path).unwrap();
        let back = load_csv(&path).unwrap();
        prop_assert_eq!(back.features.data(), d.features.data());
        prop_assert_eq!(back.labels, d.labels);
    }
}

#[test]
fn class_means_within_three_standard_errors() {
    let spec = SyntheticSpec { n_samples: 4000, n_features: 6, class_separation: 2.5, noise_std: 1.7 };
    let d = synth_blobs(&spec, 21).unwrap();
    for class in 0..2 {
        let rows: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
        let se = spec.noise_std / (rows.len() as f64).sqrt();
        let want = spec.class_mean(class);
        for j in 0..spec.n_features {
            let m = rows.iter().map(|&i| d.features.get(i, j)).sum::<f64>() / rows.len() as f64;
            assert!((m - want[j]).abs() < 3.0 * se, "class {class} col {j}: {m} vs {}", want[j]);
        }
    }
}

#[test]
fn normalization_uses_train_statistics_only() {
    let full = synth_blobs(&SyntheticSpec { n_samples: 500, n_features: 3, class_separation: 2.0, noise_std: 3.0 }, 2)
        .unwrap();
    let (train, _, test) = split(&full, &SplitSpec::default(), 2).unwrap();
    let norm = normalize_fit(&train).unwrap();
    let z = normalize_apply(&norm, &train).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..z.len()).map(|i| z.features.get(i, j)).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
    }
    let zt = normalize_apply(&norm, &test).unwrap();
    let expected = (test.features.get(0, 1) - norm.mean[1]) / norm.std[1].unwrap();
    assert_eq!(zt.features.get(0, 1), expected);
}

#[test]
fn zero_separation_is_a_coin_flip_for_a_trained_model() {
    use privfed::accountant::Conversion;
    use privfed::nn::{evaluate, MlpConfig};
    use privfed::train::{train_central, CentralSetup, LocalTraining, OptimizerKind, Sampling};
    let full = synth_blobs(&SyntheticSpec { n_samples: 2000, n_features: 4, class_separation: 0.0, noise_std: 1.0 }, 5)
        .unwrap();
    let (train, _, test) = split(&full, &SplitSpec::default(), 5).unwrap();
    let out = train_central(
        &CentralSetup {
            model: MlpConfig::with_defaults(4, 2),
            training: LocalTraining {
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.001,
                lot_size: 64,
                sampling: Sampling::Shuffle,
                dp: None,
            },
            epochs: 10,
            budget: None,
            conversion: Conversion::Classic,
            seed: 5,
        },
        &train,
        &mut |_, _| Ok(()),
        &mut |_| {},
    )
    .unwrap();
    let acc = evaluate(&out.model, &test.features, &test.labels).unwrap();
    assert!((0.4..=0.6).contains(&acc), "{acc}");
}

#[test]
fn separated_blobs_are_learnable_to_the_linear_oracle() {
    use privfed::accountant::Conversion;
    use privfed::nn::{evaluate, MlpConfig};
    use privfed::train::{train_central, CentralSetup, LocalTraining, OptimizerKind, Sampling};
    let spec = SyntheticSpec { n_samples: 10_000, n_features: 10, class_separation: 6.0, noise_std: 1.0 };
    let full = synth_blobs(&spec, 8).unwrap();
    let (train, _, test) = split(&full, &SplitSpec::default(), 8).unwrap();
    // Bayes rule: sign of the projection on the mean-difference direction
    let oracle = (0..test.len())
        .filter(|&i| {
            let proj: f64 = test.features.row(i).iter().sum();
            usize::from(proj > 0.0) == test.labels[i]
        })
        .count() as f64
        / test.len() as f64;
    assert!(oracle > 0.99, "{oracle}");
    let out = train_central(
        &CentralSetup {
            model: MlpConfig::with_defaults(10, 2),
            training: LocalTraining {
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.003,
                lot_size: 128,
                sampling: Sampling::Shuffle,
                dp: None,
            },
            epochs: 5,
            budget: None,
            conversion: Conversion::Classic,
            seed: 8,
        },
        &train,
        &mut |_, _| Ok(()),
        &mut |_| {},
    )
    .unwrap();
    let acc = evaluate(&out.model, &test.features, &test.labels).unwrap();
    assert!(acc > 0.99, "{acc}");
}
