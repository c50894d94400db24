mod common;

use proptest::prelude::*;

use volflow::flow::{FlowConfig, FlowModel};
use volflow::train::{adam_step, train, TrainConfig, TrainState};

use common::patch_source;

fn tiny() -> FlowConfig {
    FlowConfig {
        levels: 2,
        flows_per_level: 1,
        patch_edge: 8,
        in_channels: 1,
        coupling_hidden: 4,
        scale_clamp: 2.0,
    }
}

fn short_run(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        lr: 1e-3,
        log_every: 5,
        checkpoint_every: 1000,
        eval_patches: 4,
        ..TrainConfig::default()
    }
}

fn run_in_pool(threads: usize) -> (Vec<f32>, Vec<(u64, f64)>) {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| {
            let mut source = patch_source(32, &[1, 2], 8);
            let r = train::<f32>(tiny(), &short_run(20), &mut source, None).unwrap();
            (r.state.model.params.flatten(), r.state.history)
        })
}

#[test]
fn training_is_bit_reproducible_across_runs_and_thread_counts() {
    let (a, ha) = run_in_pool(1);
    let (b, hb) = run_in_pool(1);
    let (c, hc) = run_in_pool(3);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&a), bits(&c));
    assert_eq!(ha, hb);
    assert_eq!(ha, hc);
}

#[test]
fn checkpoints_written_on_schedule_and_at_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.rflw");
    let mut source = patch_source(32, &[3], 8);
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..short_run(10)
    };
    let r = train::<f32>(tiny(), &cfg, &mut source, Some(&out)).unwrap();
    assert_eq!(r.checkpoints.len(), 3);
    assert!(out.exists());
    assert_eq!(r.log.first().unwrap().step, 1);
    assert_eq!(r.log.last().unwrap().step, 10);
}

/// Textbook AdamW on one scalar.
fn adamw_oracle(theta: f64, grads: &[f64], cfg: &TrainConfig) -> f64 {
    let (mut t, mut m, mut v) = (theta, 0.0, 0.0);
    for (k, &g) in grads.iter().enumerate() {
        let step = (k + 1) as i32;
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g * g;
        let mh = m / (1.0 - cfg.adam_beta1.powi(step));
        let vh = v / (1.0 - cfg.adam_beta2.powi(step));
        t = t * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adam_matches_scalar_oracle(grads in prop::collection::vec(-0.01f64..0.01, 1..8), lr in 1e-5f64..1e-2) {
        let cfg = TrainConfig { lr, weight_decay: 0.1, ..TrainConfig::default() };
        let model = FlowModel::<f64>::random(tiny(), 1, 1.0).unwrap();
        let theta = model.params.flatten();
        let mut state = TrainState::new(model.clone());
        for &g in &grads {
            let mut gp = model.params.zeros_like();
            let mut flat = vec![0.0; theta.len()];
            flat[0] = g;
            gp.assign_flat(&flat).unwrap();
            adam_step(&mut state, &gp, &cfg).unwrap();
        }
        let got = state.model.params.flatten();
        let want = adamw_oracle(theta[0], &grads, &cfg);
        prop_assert!((got[0] - want).abs() <= 1e-12 * want.abs().max(1.0));
        let decay = (1.0 - lr * 0.1).powi(grads.len() as i32);
        prop_assert!((got[1] - theta[1] * decay).abs() <= 1e-12 * theta[1].abs().max(1e-300));
    }
}
