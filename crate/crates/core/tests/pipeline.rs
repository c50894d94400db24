use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volflow::metrics::Label;
use volflow::patching::{inference_grid, GridSpec};
use volflow::pipeline::{aggregate_map, anomaly_volume_cm3, classify, filter_components, quantile_sorted, PatchScore};
use volflow::volume::Mask;

const DIMS: [usize; 3] = [12, 14, 12];

fn grid() -> GridSpec {
    GridSpec::new(6, 3).unwrap()
}

fn scores(seed: u64) -> Vec<PatchScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inference_grid(DIMS, &grid())
        .unwrap()
        .into_iter()
        .map(|origin| PatchScore {
            origin,
            per_dim_nats: rng.random_range(-4.0..2.0),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregation_ignores_score_order(seed in any::<u64>(), sigma in 0.0f64..2.5) {
        let s = scores(seed);
        let mut shuffled = s.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let a = aggregate_map(&s, DIMS, [2.0; 3], &grid(), sigma).unwrap();
        let b = aggregate_map(&shuffled, DIMS, [2.0; 3], &grid(), sigma).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn lowering_a_score_never_raises_the_map(seed in any::<u64>(), which in any::<prop::sample::Index>(), drop in 0.0f64..3.0) {
        let s = scores(seed);
        let mut lower = s.clone();
        lower[which.index(s.len())].per_dim_nats -= drop;
        let a = aggregate_map(&s, DIMS, [2.0; 3], &grid(), 1.5).unwrap();
        let b = aggregate_map(&lower, DIMS, [2.0; 3], &grid(), 1.5).unwrap();
        // Allow for rounding in the incremental mean.
        prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| *y <= *x + 1e-12));
    }

    #[test]
    fn filtering_only_removes_voxels(bits in prop::collection::vec(prop::bool::weighted(0.3), 12 * 14 * 12), min in 0.0f64..0.2) {
        let m = Mask::new(DIMS, bits).unwrap();
        let f = filter_components(&m, [2.0; 3], min);
        prop_assert!(f.is_subset_of(&m));
        prop_assert!(anomaly_volume_cm3(&f, [2.0; 3]) <= anomaly_volume_cm3(&m, [2.0; 3]));
    }

    #[test]
    fn classification_is_monotone_in_volume(a in 0usize..2000, b in 0usize..2000, t in 0.5f64..20.0) {
        let mask = |n: usize| {
            let mut bits = vec![false; 12 * 14 * 12];
            let k = n.min(bits.len());
            bits[..k].iter_mut().for_each(|x| *x = true);
            Mask::new(DIMS, bits).unwrap()
        };
        let (lo, hi) = (a.min(b), a.max(b));
        let small = classify(&mask(lo), [2.0; 3], t).unwrap();
        let large = classify(&mask(hi), [2.0; 3], t).unwrap();
        prop_assert!(small.anomaly_volume_cm3 <= large.anomaly_volume_cm3);
        if small.label == Label::Abnormal {
            prop_assert_eq!(large.label, Label::Abnormal);
        }
    }

    #[test]
    fn quantile_matches_linear_interpolation(mut xs in prop::collection::vec(-10.0f64..10.0, 1..60), q in 0.0f64..=1.0) {
        xs.sort_by(f64::total_cmp);
        let got = quantile_sorted(&xs, q).unwrap();
        // Linear interpolation between order statistics at position q(n - 1).
        let pos = q * (xs.len() - 1) as f64;
        let (i, j) = (pos.floor() as usize, pos.ceil() as usize);
        let want = xs[i] * (1.0 - (pos - i as f64)) + xs[j] * (pos - i as f64);
        prop_assert!((got - want).abs() <= 1e-12);
        prop_assert!(got >= xs[0] && got <= xs[xs.len() - 1]);
    }
}
