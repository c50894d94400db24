#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volflow::flow::Tensor;
use volflow::preprocess::{clip_normalize, fallback_lung_mask, PreprocessConfig};
use volflow::synth::{generate_synthetic, SynthSpec};
use volflow::train::{PatchSource, VolumePatchSource};
use volflow::volume::{Mask, Volume};

/// A normalised lesion-free synthetic volume and its fallback lung mask.
pub fn normal_case(size: usize, seed: u64) -> (Volume, Mask) {
    let case = generate_synthetic(&SynthSpec::normal([size; 3], [2.0; 3], seed)).unwrap();
    let (lung, _) = fallback_lung_mask(&case.volume);
    (
        clip_normalize(&case.volume, &PreprocessConfig::default()).unwrap(),
        lung,
    )
}

pub fn patch_source(size: usize, seeds: &[u64], edge: usize) -> VolumePatchSource {
    VolumePatchSource {
        cases: seeds.iter().map(|&s| normal_case(size, s)).collect(),
        edge,
        min_mask_fraction: 0.5,
    }
}

pub fn real_patches(source: &mut VolumePatchSource, n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    source
        .next_batch(n, &mut rng)
        .unwrap()
        .iter()
        .map(|p| Tensor::<f32>::from_patch(&p.data, p.edge).unwrap().cast())
        .collect()
}

pub fn uniform_tensor(channels: usize, edge: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = channels * edge.pow(3);
    Tensor::from_vec(
        channels,
        [edge; 3],
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )
    .unwrap()
}

pub fn normal_tensor(channels: usize, edge: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = channels * edge.pow(3);
    Tensor::from_vec(
        channels,
        [edge; 3],
        (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect(),
    )
    .unwrap()
}
