//! Maximum-likelihood training with Adam and decoupled weight decay.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{save_checkpoint, FlowConfig, FlowModel, FlowParams, Tensor};
use crate::patching::{sample_training_patches, Patch};
use crate::real::Real;
use crate::volume::{Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub dequant_bin: f64,
    pub grad_clip_norm: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Patches held out of training and scored before and after it.
    pub eval_patches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 10,
            lr: 1e-4,
            weight_decay: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            dequant_bin: 1.0 / 1220.0,
            grad_clip_norm: 50.0,
            log_every: 50,
            checkpoint_every: 500,
            eval_patches: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("grad_clip_norm", self.grad_clip_norm),
            ("log_every", self.log_every as f64),
            ("checkpoint_every", self.checkpoint_every as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("dequant_bin", self.dequant_bin)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("line {}: {key}: {e}", n + 1));
            macro_rules! set {
                ($field:ident) => {
                    cfg.$field = value.parse().map_err(|e| bad(&e))?
                };
            }
            match key {
                "iterations" => set!(iterations),
                "batch_size" => set!(batch_size),
                "lr" => set!(lr),
                "weight_decay" => set!(weight_decay),
                "adam_beta1" => set!(adam_beta1),
                "adam_beta2" => set!(adam_beta2),
                "adam_eps" => set!(adam_eps),
                "seed" => set!(seed),
                "dequant_bin" => set!(dequant_bin),
                "grad_clip_norm" => set!(grad_clip_norm),
                "log_every" => set!(log_every),
                "checkpoint_every" => set!(checkpoint_every),
                "eval_patches" => set!(eval_patches),
                _ => return Err(Error::Config(format!("line {}: unknown key {key}", n + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: FlowModel<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    /// (step, batch bits/dim) at every logged step.
    pub history: Vec<(u64, f64)>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: FlowModel<T>) -> Self {
        let n = model.params.num_trainable();
        TrainState {
            model,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            history: Vec::new(),
        }
    }
}

/// Adds `Uniform[0, bin)` noise to every element.
pub fn dequantize<T: Real, R: Rng + ?Sized>(x: &mut Tensor<T>, bin: f64, rng: &mut R) {
    if bin > 0.0 {
        for v in x.data_mut() {
            *v += T::of(bin * rng.random::<f64>());
        }
    }
}

fn bits_scale(model_cfg: &FlowConfig, batch: usize) -> f64 {
    1.0 / (model_cfg.dims() as f64 * std::f64::consts::LN_2 * batch as f64)
}

/// Mean bits/dim of an already-dequantized batch.
pub fn batch_bits_per_dim<T: Real>(model: &FlowModel<T>, batch: &[Tensor<T>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let nats = batch
        .par_iter()
        .map(|x| model.log_prob(x).map(|d| d.nats))
        .collect::<Result<Vec<_>>>()?;
    Ok(-nats.iter().sum::<f64>() * bits_scale(&model.config, batch.len()))
}

/// Mean bits/dim of `batch` after dequantization with `rng`.
pub fn nll_loss<T: Real, R: Rng + ?Sized>(
    model: &FlowModel<T>,
    batch: &[Tensor<T>],
    dequant_bin: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut noisy = batch.to_vec();
    for x in &mut noisy {
        dequantize(x, dequant_bin, rng);
    }
    batch_bits_per_dim(model, &noisy)
}

/// Mean bits/dim of a dequantized batch and its parameter gradient.
///
/// Per-sample gradients are computed in parallel and summed in batch order,
/// so the result does not depend on the thread count.
pub fn loss_and_grad<T: Real>(model: &FlowModel<T>, batch: &[Tensor<T>]) -> Result<(f64, FlowParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let per_sample = batch
        .par_iter()
        .map(|x| {
            let mut g = model.params.zeros_like();
            model.nll_backward(x, &mut g).map(|nll| (nll, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = bits_scale(&model.config, batch.len());
    let mut nll = 0.0;
    let mut grads = model.params.zeros_like();
    for (n, g) in &per_sample {
        nll += n.f64();
        grads.add_assign(g);
    }
    grads.scale(T::of(scale));
    Ok((nll * scale, grads))
}

/// One Adam update with global-norm clipping and decoupled weight decay.
/// Returns the pre-clipping gradient norm. On a non-finite gradient the state
/// is left untouched.
pub fn adam_step<T: Real>(state: &mut TrainState<T>, grads: &FlowParams<T>, cfg: &TrainConfig) -> Result<f64> {
    let g = grads.flatten();
    if g.len() != state.m.len() {
        return Err(Error::Structure(format!(
            "{} gradients for {} parameters",
            g.len(),
            state.m.len()
        )));
    }
    let norm = g.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric {
            step: state.step + 1,
            what: "non-finite gradient".into(),
        });
    }
    let clip = if norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    let t = (state.step + 1) as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let mut theta = state.model.params.flatten();
    for i in 0..theta.len() {
        let gi = g[i].f64() * clip;
        let m = b1 * state.m[i].f64() + (1.0 - b1) * gi;
        let v = b2 * state.v[i].f64() + (1.0 - b2) * gi * gi;
        state.m[i] = T::of(m);
        state.v[i] = T::of(v);
        let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
        theta[i] = T::of(theta[i].f64() * decay - update);
    }
    state.model.params.assign_flat(&theta)?;
    state.step += 1;
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes discarded because `θ ± h` fell on different ReLU pieces.
    pub skipped_kinks: usize,
}

/// Compares analytic gradients of the batch bits/dim against central
/// differences on `count` randomly chosen trainable parameters.
///
/// A central difference across a ReLU kink measures the average of two
/// one-sided slopes rather than the derivative, so a probe whose `θ + h` and
/// `θ − h` activation patterns differ is discarded and another parameter is
/// drawn in its place.
pub fn grad_check(model: &FlowModel<f64>, batch: &[Tensor<f64>], count: usize, seed: u64) -> Result<GradCheck> {
    let (_, grads) = loss_and_grad(model, batch)?;
    let analytic = grads.flatten();
    let n = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = rand::seq::index::sample(&mut rng, n, n.min(count.saturating_mul(4))).into_vec();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for i in order {
        if result.checked == count {
            break;
        }
        match probe(model, batch, analytic[i], i)? {
            Some(rel) => {
                result.max_rel_error = result.max_rel_error.max(rel);
                result.checked += 1;
            }
            None => result.skipped_kinks += 1,
        }
    }
    Ok(result)
}

/// Central-difference check of `analytic` at the given flat parameter
/// indices, discarding probes that straddle a ReLU kink.
pub fn grad_check_at(
    model: &FlowModel<f64>,
    batch: &[Tensor<f64>],
    analytic: &[f64],
    indices: &[usize],
) -> Result<GradCheck> {
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for &i in indices {
        match probe(model, batch, analytic[i], i)? {
            Some(rel) => {
                result.max_rel_error = result.max_rel_error.max(rel);
                result.checked += 1;
            }
            None => result.skipped_kinks += 1,
        }
    }
    Ok(result)
}

fn relu_patterns(model: &FlowModel<f64>, batch: &[Tensor<f64>]) -> Result<Vec<Vec<bool>>> {
    batch.iter().map(|x| model.relu_pattern(x)).collect()
}

fn probe(model: &FlowModel<f64>, batch: &[Tensor<f64>], analytic: f64, i: usize) -> Result<Option<f64>> {
    let theta = model.params.flatten();
    let h = 1e-5 * (theta[i].abs() + 1.0);
    let mut probe = model.clone();
    let mut t = theta.clone();
    t[i] = theta[i] + h;
    probe.params.assign_flat(&t)?;
    let up = batch_bits_per_dim(&probe, batch)?;
    let up_pattern = relu_patterns(&probe, batch)?;
    t[i] = theta[i] - h;
    probe.params.assign_flat(&t)?;
    let down = batch_bits_per_dim(&probe, batch)?;
    if relu_patterns(&probe, batch)? != up_pattern {
        return Ok(None);
    }
    let numeric = (up - down) / (2.0 * h);
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    Ok(Some((analytic - numeric).abs() / denom))
}

/// A stream of normalised training patches.
pub trait PatchSource {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Patch>>;
}

/// Draws each patch from a uniformly chosen volume, at an origin uniform over
/// the positions with enough lung coverage.
pub struct VolumePatchSource {
    pub cases: Vec<(Volume, Mask)>,
    pub edge: usize,
    pub min_mask_fraction: f64,
}

impl PatchSource for VolumePatchSource {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Patch>> {
        if self.cases.is_empty() {
            return Err(Error::Sampling("no training volumes".into()));
        }
        (0..n)
            .map(|_| {
                let (v, m) = &self.cases[rng.random_range(0..self.cases.len())];
                let mut p = sample_training_patches(v, m, 1, self.edge, self.min_mask_fraction, rng)?;
                Ok(p.pop().expect("one patch requested"))
            })
            .collect()
    }
}

/// Samples with replacement from a fixed set of patches.
pub struct PatchPool {
    pub patches: Vec<Patch>,
}

impl PatchSource for PatchPool {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Patch>> {
        if self.patches.is_empty() {
            return Err(Error::Sampling("patch pool is empty".into()));
        }
        Ok((0..n)
            .map(|_| self.patches.choose(rng).expect("non-empty").clone())
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub bits_per_dim: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,bits_per_dim,grad_norm,wallclock_s\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.3}", r.step, r.bits_per_dim, r.grad_norm, r.wallclock_s);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub state: TrainState<T>,
    pub log: Vec<LogRow>,
    /// Bits/dim of the held-out batch right after actnorm initialisation.
    pub initial_bits_per_dim: f64,
    pub final_bits_per_dim: f64,
    pub checkpoints: Vec<PathBuf>,
}

fn to_tensors<T: Real>(patches: &[Patch]) -> Result<Vec<Tensor<T>>> {
    patches
        .iter()
        .map(|p| Tensor::<f32>::from_patch(&p.data, p.edge).map(|t| t.cast()))
        .collect()
}

/// Runs actnorm initialisation on the first batch, then `cfg.iterations`
/// Adam steps. With `out` set, checkpoints go to `out` every
/// `checkpoint_every` steps and at the end. A numeric failure aborts and
/// leaves the last written checkpoint in place.
pub fn train<T: Real>(
    model_cfg: FlowConfig,
    cfg: &TrainConfig,
    source: &mut dyn PatchSource,
    out: Option<&Path>,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FlowModel::<T>::init(model_cfg, rng.random())?;

    let first = to_tensors::<T>(&source.next_batch(cfg.batch_size.max(2), &mut rng)?)?;
    let mut first_noisy = first;
    for x in &mut first_noisy {
        dequantize(x, cfg.dequant_bin, &mut rng);
    }
    model.actnorm_init(&first_noisy)?;

    let mut eval = to_tensors::<T>(&source.next_batch(cfg.eval_patches.max(1), &mut rng)?)?;
    for x in &mut eval {
        dequantize(x, cfg.dequant_bin, &mut rng);
    }
    let initial_bits_per_dim = batch_bits_per_dim(&model, &eval)?;

    let mut state = TrainState::new(model);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let save = |state: &TrainState<T>, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(path) = out {
            save_checkpoint(path, &state.model)?;
            checkpoints.push(path.to_path_buf());
        }
        Ok(())
    };

    for step in 1..=cfg.iterations {
        let mut batch = to_tensors::<T>(&source.next_batch(cfg.batch_size, &mut rng)?)?;
        for x in &mut batch {
            dequantize(x, cfg.dequant_bin, &mut rng);
        }
        let (bpd, grads) = loss_and_grad(&state.model, &batch)?;
        if !bpd.is_finite() {
            return Err(Error::Numeric {
                step,
                what: format!("loss is {bpd}"),
            });
        }
        let norm = adam_step(&mut state, &grads, cfg)?;
        if step % cfg.log_every == 0 || step == 1 {
            state.history.push((step, bpd));
            let row = LogRow {
                step,
                bits_per_dim: bpd,
                grad_norm: norm,
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            log::info!("step {step}: {bpd:.4} bits/dim, |g| = {norm:.3e}");
            log.push(row);
        }
        if step % cfg.checkpoint_every == 0 && step != cfg.iterations {
            save(&state, &mut checkpoints)?;
        }
    }
    save(&state, &mut checkpoints)?;
    let final_bits_per_dim = batch_bits_per_dim(&state.model, &eval)?;
    Ok(TrainReport {
        state,
        log,
        initial_bits_per_dim,
        final_bits_per_dim,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FlowConfig {
        FlowConfig {
            levels: 1,
            flows_per_level: 1,
            patch_edge: 2,
            in_channels: 2,
            coupling_hidden: 2,
            scale_clamp: 2.0,
        }
    }

    #[test]
    fn identity_zero_batch_bits_per_dim() {
        let m = FlowModel::<f64>::identity(tiny()).unwrap();
        let batch = vec![Tensor::zeros(2, [2, 2, 2]); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bpd = nll_loss(&m, &batch, 0.0, &mut rng).unwrap();
        let want = 8.0 * (2.0 * std::f64::consts::PI).ln() / (16.0 * std::f64::consts::LN_2);
        assert!((bpd - want).abs() < 1e-12);
        assert!((bpd - 1.3257).abs() < 1e-4);
    }

    #[test]
    fn single_scalar_adam_step() {
        let mut state = TrainState::new(FlowModel::<f64>::identity(tiny()).unwrap());
        let mut g = state.model.params.zeros_like();
        g.levels[0][0].actnorm.bias[0] = 1.0;
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adam_step(&mut state, &g, &cfg).unwrap();
        let b = state.model.params.levels[0][0].actnorm.bias[0];
        assert!((b + cfg.lr / (1.0 + cfg.adam_eps)).abs() < 1e-18);
        assert_eq!(state.model.params.levels[0][0].actnorm.bias[1], 0.0);
    }

    #[test]
    fn decay_alone_is_geometric() {
        let mut state = TrainState::new(FlowModel::<f64>::random(tiny(), 1, 1.0).unwrap());
        let before = state.model.params.flatten();
        let zero = state.model.params.zeros_like();
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        for _ in 0..3 {
            adam_step(&mut state, &zero, &cfg).unwrap();
        }
        let f = (1.0f64 - 0.05).powi(3);
        for (a, b) in state.model.params.flatten().iter().zip(&before) {
            assert!((a - b * f).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn non_finite_gradient_leaves_state() {
        let mut state = TrainState::new(FlowModel::<f64>::random(tiny(), 2, 1.0).unwrap());
        let before = state.clone();
        let mut g = state.model.params.zeros_like();
        g.levels[0][0].actnorm.log_scale[0] = f64::INFINITY;
        let err = adam_step(&mut state, &g, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: 1, .. }));
        assert_eq!(state, before);
    }

    #[test]
    fn config_parse() {
        let c = TrainConfig::parse("iterations = 7\n# comment\nlr=0.5 # trailing\n").unwrap();
        assert_eq!(c.iterations, 7);
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.batch_size, 10);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("lr").is_err());
    }
}
