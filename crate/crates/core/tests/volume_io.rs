use proptest::prelude::*;

use volflow::rvol::{decode_mask, decode_volume, encode_mask, encode_volume, read_volume, write_volume};
use volflow::synth::{generate_synthetic, SynthSpec};
use volflow::volume::{Mask, ValueSpace, Volume};

fn volume_strategy() -> impl Strategy<Value = Volume> {
    (1usize..6, 1usize..6, 1usize..6, 0.1f32..5.0, 0.1f32..5.0, 0.1f32..5.0).prop_flat_map(|(d, h, w, a, b, c)| {
        prop::collection::vec(-3000.0f32..3000.0, d * h * w)
            .prop_map(move |v| Volume::new([d, h, w], [a, b, c], v, ValueSpace::Hu).unwrap())
    })
}

proptest! {
    #[test]
    fn volume_round_trip_is_bit_exact(v in volume_strategy()) {
        let bytes = encode_volume(&v).unwrap();
        prop_assert_eq!(bytes.len(), 34 + 4 * v.voxels().len());
        let back = decode_volume(&bytes).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing(), v.spacing());
        let same = back.voxels().iter().zip(v.voxels()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn mask_round_trip(bits in prop::collection::vec(any::<bool>(), 60)) {
        let m = Mask::new([3, 4, 5], bits).unwrap();
        let (back, spacing) = decode_mask(&encode_mask(&m, [1.0, 2.0, 3.0])).unwrap();
        prop_assert_eq!(back, m);
        prop_assert_eq!(spacing, [1.0, 2.0, 3.0]);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.rvol");
    let v = Volume::from_fn([4, 3, 2], [2.0, 2.0, 2.5], ValueSpace::Normalized, |z, y, x| {
        (z as f32 - y as f32 * 0.1 + x as f32 * 0.01) / 10.0
    })
    .unwrap();
    write_volume(&v, &path).unwrap();
    assert_eq!(read_volume(&path).unwrap(), v);
}

#[test]
fn synthetic_cases_are_pure_and_lesions_stay_in_lung() {
    for seed in 0..4 {
        let spec = SynthSpec {
            lesion_count: 2,
            lesion_radius_mm: 8.0 + seed as f64,
            ..SynthSpec::normal([40; 3], [2.0; 3], seed)
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert!(!a.lesions.is_empty());
        assert!(a.lesions.is_subset_of(&a.lung));
    }
}
