#![allow(clippy::needless_range_loop)]

use angiosynth::attention::{apply_cross_slice, cross_slice_weights, AttentionMatrix, SliceFeature};
use angiosynth::tokens::TokenGrid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<SliceFeature> {
    (0..n)
        .map(|_| SliceFeature {
            h: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mask: rng.random_range(0.0..1.0),
        })
        .collect()
}

fn random_grids(n: usize, rng: &mut ChaCha8Rng) -> Vec<TokenGrid> {
    (0..n)
        .map(|_| TokenGrid::new(2, 3, 2, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
        .collect()
}

#[test]
fn two_slice_hand_value() {
    let features = [
        SliceFeature { h: vec![1.0, 0.0], mask: 1.0 },
        SliceFeature { h: vec![0.5, 3f64.sqrt() / 2.0], mask: 1.0 },
    ];
    let alpha = cross_slice_weights(&features, 0.2, 1).unwrap();
    let expected = 1.2f64.exp() / (1.2f64.exp() + 0.7f64.exp());
    assert!((alpha.get(0, 0) - expected).abs() < 1e-9);
    assert!((alpha.get(0, 1) - (1.0 - expected)).abs() < 1e-9);
}

#[test]
fn rows_are_stochastic_over_50_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..50 {
        let n = rng.random_range(1..=12);
        let features = random_features(n, rng.random_range(1..=5), &mut rng);
        let alpha = cross_slice_weights(&features, rng.random_range(-2.0..4.0), rng.random_range(1..=4)).unwrap();
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|k| alpha.get(i, k)).collect();
            assert!(row.iter().all(|&a| a >= 0.0), "case {case} row {i}");
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "case {case} row {i}");
        }
    }
}

#[test]
fn explicit_row_fuses_as_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grids = random_grids(2, &mut rng);
    let alpha = AttentionMatrix::from_weights(2, vec![0.25, 0.75, 0.0, 1.0]).unwrap();
    let fused = apply_cross_slice(&grids, &alpha).unwrap();
    for k in 0..12 {
        assert_eq!(fused[0].data[k], 0.25 * grids[0].data[k] + 0.75 * grids[1].data[k]);
        assert_eq!(fused[1].data[k], grids[1].data[k]);
    }
}

proptest! {
    #[test]
    fn fused_tokens_stay_in_window_hull(seed in any::<u64>(), n in 1usize..8, radius in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids = random_grids(n, &mut rng);
        let alpha = cross_slice_weights(&random_features(n, 3, &mut rng), 1.0, radius).unwrap();
        let fused = apply_cross_slice(&grids, &alpha).unwrap();
        for i in 0..n {
            let window = i.saturating_sub(radius)..(i + radius + 1).min(n);
            for k in 0..12 {
                let vals = window.clone().map(|j| grids[j].data[k]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                prop_assert!(fused[i].data[k] >= lo - 1e-12 && fused[i].data[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn raising_masks_never_lowers_logits(seed in any::<u64>(), n in 2usize..8, w in 0.0f64..3.0, boost in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = random_features(n, 3, &mut rng);
        let raised: Vec<_> = features
            .iter()
            .map(|f| SliceFeature { h: f.h.clone(), mask: f.mask + boost * (1.0 - f.mask) })
            .collect();
        let (before, after) = (cross_slice_weights(&features, w, 2).unwrap(), cross_slice_weights(&raised, w, 2).unwrap());
        for i in 0..n {
            for k in i.saturating_sub(2)..(i + 3).min(n) {
                prop_assert!(after.logit(i, k) >= before.logit(i, k));
            }
        }
    }
}
