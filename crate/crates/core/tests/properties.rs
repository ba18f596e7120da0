use mer_core::calibrate::{calibrate, calibrate_column, evaluate, threshold_grid};
use mer_core::fusion::{backward, conv1d_same, forward, temporal_mean, FusionConfig, FusionWeights, Sample};
use mer_core::train::separable_dataset;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> FusionConfig {
    FusionConfig::with_dims(6, 4, 3, 3, 3, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batch_order_does_not_change_gradients(seed in 0u64..10_000) {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = FusionWeights::random(&cfg, &mut rng);
        let batch = separable_dataset(&cfg, 7, seed);
        let mut reversed: Vec<Sample> = batch.clone();
        reversed.reverse();
        reversed.rotate_left((seed % 7) as usize);
        let (l1, g1) = backward(&batch, &w).unwrap();
        let (l2, g2) = backward(&reversed, &w).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.views().iter().zip(g2.views().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_then_mean_is_mean(t in 1usize..12, d in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((t, d), |_| rand::Rng::random_range(&mut rng, -2.0..2.0));
        let mut w = Array3::zeros((d, d, 3));
        for c in 0..d {
            w[[c, c, 1]] = 1.0;
        }
        let y = conv1d_same(x.view(), w.view(), Array1::zeros(d).view()).unwrap();
        let a = temporal_mean(y.view()).unwrap();
        let b = temporal_mean(x.view()).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_finite_and_deterministic(seed in 0u64..10_000) {
        let cfg = tiny_cfg();
        let w = FusionWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let s = &separable_dataset(&cfg, 1, seed)[0];
        let a = forward(&s.embeddings, &w).unwrap();
        let b = forward(&s.embeddings, &w).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.probs.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn increasing_output_bias_increases_probability(seed in 0u64..10_000, e in 0usize..6, delta in 0.01f64..3.0) {
        let cfg = tiny_cfg();
        let mut w = FusionWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let s = &separable_dataset(&cfg, 1, seed)[0];
        let before = forward(&s.embeddings, &w).unwrap().probs[e];
        w.lin2_b[e] += delta;
        let after = forward(&s.embeddings, &w).unwrap().probs[e];
        prop_assert!(after > before);
    }

    #[test]
    fn monotone_transform_keeps_active_set(
        probs in prop::collection::vec(1u32..99, 1..30),
        labels in prop::collection::vec(any::<bool>(), 30),
    ) {
        // Probabilities on the grid's half-steps so every transform preserves ties.
        let p: Vec<f64> = probs.iter().map(|&k| (k as f64 + 0.5) / 100.0).collect();
        let l = &labels[..p.len()];
        let grid = threshold_grid();
        let (t, _) = calibrate_column(&p, l, &grid).unwrap();
        let active: Vec<bool> = p.iter().map(|&v| v > t).collect();

        let f = |x: f64| x * x * x;
        let pt: Vec<f64> = p.iter().map(|&v| f(v)).collect();
        let gt: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
        let (t2, _) = calibrate_column(&pt, l, &gt).unwrap();
        let active2: Vec<bool> = pt.iter().map(|&v| v > t2).collect();
        prop_assert_eq!(active, active2);
    }

    #[test]
    fn evaluate_is_permutation_invariant_and_bounded(
        rows in prop::collection::vec((prop::array::uniform6(0.0f64..1.0), prop::array::uniform6(any::<bool>())), 1..40),
        shift in 0usize..40,
    ) {
        let probs: Vec<[f64; 6]> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<[bool; 6]> = rows.iter().map(|r| r.1).collect();
        let cal = calibrate(&probs, &labels).unwrap();
        let a = evaluate(&probs, &labels, &cal.thresholds).unwrap();
        let mut p2 = probs.clone();
        let mut l2 = labels.clone();
        let k = shift % probs.len();
        p2.rotate_left(k);
        l2.rotate_left(k);
        p2.reverse();
        l2.reverse();
        let b = evaluate(&p2, &l2, &cal.thresholds).unwrap();
        prop_assert_eq!(&a, &b);
        for m in &a.per_emotion {
            for v in [m.accuracy, m.f1_positive, m.f1_weighted] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        for (e, &t) in cal.thresholds.iter().enumerate() {
            prop_assert!(grid_contains(t), "threshold {} for {}", t, e);
        }
    }
}

fn grid_contains(t: f64) -> bool {
    threshold_grid().contains(&t)
}
