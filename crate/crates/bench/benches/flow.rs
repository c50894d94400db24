use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use volflow::flow::{Conv3d, FlowConfig, FlowModel, Tensor};
use volflow::patching::inference_grid;
use volflow::patching::GridSpec;
use volflow::pipeline::{aggregate_map, PatchScore};
use volflow::train::loss_and_grad;

fn patch(edge: usize, seed: u64) -> Tensor<f32> {
    let n = edge.pow(3);
    let data: Vec<f32> = (0..n)
        .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 1000.0 - 0.5)
        .collect();
    Tensor::from_patch(&data, edge).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = Conv3d::<f32>::random(3, 4, 32, 0.05, &mut rng);
    let x = Tensor::from_vec(4, [8, 8, 8], vec![0.1; 4 * 512]).unwrap();
    c.bench_function("conv3 4->32 on 8^3", |b| {
        b.iter(|| black_box(layer.forward(black_box(&x))))
    });
    let gout = layer.forward(&x);
    let mut grad = Conv3d::zeros(3, 4, 32);
    c.bench_function("conv3 4->32 backward", |b| {
        b.iter(|| black_box(layer.backward(&x, &gout, &mut grad, true)))
    });
}

fn flow(c: &mut Criterion) {
    let cfg = FlowConfig::desk();
    let model = FlowModel::<f32>::random(cfg, 3, 0.05).unwrap();
    let x = patch(cfg.patch_edge, 7);
    c.bench_function("desk log_prob f32", |b| {
        b.iter(|| black_box(model.log_prob(black_box(&x)).unwrap()))
    });
    let batch: Vec<_> = (0..4).map(|s| patch(cfg.patch_edge, s)).collect();
    c.bench_function("desk loss_and_grad f32 x4", |b| {
        b.iter(|| black_box(loss_and_grad(&model, black_box(&batch)).unwrap()))
    });
}

fn aggregate(c: &mut Criterion) {
    let grid = GridSpec::new(16, 10).unwrap();
    let dims = [64, 64, 64];
    let scores: Vec<PatchScore> = inference_grid(dims, &grid)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, origin)| PatchScore {
            origin,
            per_dim_nats: (i % 17) as f64 * 0.1,
        })
        .collect();
    c.bench_function("aggregate 64^3 stride 6", |b| {
        b.iter(|| black_box(aggregate_map(&scores, dims, [2.0; 3], &grid, 2.0).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, flow, aggregate
}
criterion_main!(benches);
