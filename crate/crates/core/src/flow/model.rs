//! Multi-scale composition: per level a squeeze, `K` flow steps
//! (actnorm → invertible 1×1×1 conv → affine coupling), then a split whose
//! second half is factored out to the standard-normal prior. The last level
//! emits its whole output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::actnorm::ActNorm;
use super::conv::Conv3d;
use super::coupling::{Coupling, CouplingCache};
use super::invconv::InvConv;
use super::reshape::{split, squeeze, unsqueeze};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::{CompensatedSum, Real};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub levels: usize,
    pub flows_per_level: usize,
    pub patch_edge: usize,
    pub in_channels: usize,
    pub coupling_hidden: usize,
    pub scale_clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FlowConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk() -> Self {
        FlowConfig {
            levels: 2,
            flows_per_level: 4,
            patch_edge: 16,
            in_channels: 1,
            coupling_hidden: 32,
            scale_clamp: 2.0,
        }
    }

    /// Full-size configuration: 48³ patches, 4 levels of 64 flow steps.
    pub fn full_scale() -> Self {
        FlowConfig {
            levels: 4,
            flows_per_level: 64,
            patch_edge: 48,
            in_channels: 1,
            coupling_hidden: 512,
            scale_clamp: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.flows_per_level == 0 || self.in_channels == 0 || self.coupling_hidden == 0 {
            return Err(Error::Config(format!("all flow sizes must be positive: {self:?}")));
        }
        if self.patch_edge == 0 || !self.patch_edge.is_multiple_of(1 << self.levels) {
            return Err(Error::Config(format!(
                "patch edge {} is not divisible by 2^{}",
                self.patch_edge, self.levels
            )));
        }
        if !(self.scale_clamp > 0.0) || !self.scale_clamp.is_finite() {
            return Err(Error::Config(format!(
                "scale clamp must be positive, got {}",
                self.scale_clamp
            )));
        }
        Ok(())
    }

    /// Number of scalar dimensions of one input patch.
    pub fn dims(&self) -> usize {
        self.in_channels * self.patch_edge.pow(3)
    }

    /// (channels, edge) seen by the flow steps of each level.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        let mut c = self.in_channels;
        let mut e = self.patch_edge;
        let mut out = Vec::with_capacity(self.levels);
        for _ in 0..self.levels {
            c *= 8;
            e /= 2;
            out.push((c, e));
            c /= 2;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep<T> {
    pub actnorm: ActNorm<T>,
    pub invconv: InvConv<T>,
    pub coupling: Coupling<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams<T> {
    pub levels: Vec<Vec<FlowStep<T>>>,
}

/// Latent tensors in emission order: one per split, then the last level.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<T> {
    pub parts: Vec<Tensor<T>>,
}

impl<T: Real> LatentBundle<T> {
    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.parts.iter().flat_map(|p| p.data().iter().copied())
    }

    /// Σ of standard-normal log densities over all elements, in nats.
    pub fn prior_log_prob(&self) -> f64 {
        let sq: CompensatedSum<f64> = self.values().map(|z| z.f64() * z.f64()).collect();
        -0.5 * sq.value() - HALF_LN_2PI * self.len() as f64
    }

    pub fn max_abs_diff(&self, other: &LatentBundle<T>) -> f64 {
        self.parts
            .iter()
            .zip(&other.parts)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogDensity {
    pub nats: f64,
    pub per_dim_nats: f64,
    pub bits_per_dim: f64,
}

impl LogDensity {
    pub fn from_nats(nats: f64, dims: usize) -> Self {
        let per_dim_nats = nats / dims as f64;
        LogDensity {
            nats,
            per_dim_nats,
            bits_per_dim: -per_dim_nats / std::f64::consts::LN_2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    pub config: FlowConfig,
    pub params: FlowParams<T>,
}

struct StepTrace<T> {
    actnorm_in: Tensor<T>,
    invconv_in: Tensor<T>,
    coupling: CouplingCache<T>,
}

impl<T: Real> FlowModel<T> {
    fn build(config: FlowConfig, mut step: impl FnMut(usize) -> Result<FlowStep<T>>) -> Result<Self> {
        config.validate()?;
        let levels = config
            .level_shapes()
            .into_iter()
            .map(|(c, _)| (0..config.flows_per_level).map(|_| step(c)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowModel {
            config,
            params: FlowParams { levels },
        })
    }

    /// Every step is the identity: the model is a pure permutation of its input.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        Self::build(config, |c| {
            Ok(FlowStep {
                actnorm: ActNorm::identity(c),
                invconv: InvConv::identity(c),
                coupling: Coupling::zeros(c, config.coupling_hidden)?,
            })
        })
    }

    /// Training initialisation: random orthogonal 1×1×1 convs, Gaussian hidden
    /// subnet layers, zero subnet outputs, identity actnorm (pending data init).
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |c| {
            Ok(FlowStep {
                actnorm: ActNorm::identity(c),
                invconv: InvConv::random_orthogonal(c, &mut rng),
                coupling: Coupling::init(c, config.coupling_hidden, &mut rng)?,
            })
        })
    }

    /// Every parameter randomised, including the subnet output layer, with
    /// magnitudes kept moderate so the map stays well conditioned. Used to
    /// exercise the layers away from their identity initialisation.
    pub fn random(config: FlowConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = config.coupling_hidden;
        Self::build(config, |c| {
            let mut actnorm = ActNorm::identity(c);
            for (s, b) in actnorm.log_scale.iter_mut().zip(actnorm.bias.iter_mut()) {
                *s = T::of(scale * rng.random_range(-0.5..0.5));
                *b = T::of(scale * rng.random_range(-0.5..0.5));
            }
            let mut invconv = InvConv::random_orthogonal(c, &mut rng);
            for i in 0..c {
                invconv.log_s[i] += T::of(scale * rng.random_range(-0.3..0.3));
                for j in 0..c {
                    let v = T::of(scale * 0.3 * rng.random_range(-1.0..1.0) / (c as f64).sqrt());
                    if j < i {
                        invconv.lower[i * c + j] += v;
                    } else if j > i {
                        invconv.upper[i * c + j] += v;
                    }
                }
            }
            let mut coupling = Coupling::init(c, hidden, &mut rng)?;
            coupling.net_out = Conv3d::random(3, hidden, c, scale * (0.5 / (27.0 * hidden as f64)).sqrt(), &mut rng);
            for b in coupling.net_in.bias.iter_mut().chain(coupling.net_mid.bias.iter_mut()) {
                *b = T::of(0.1 * scale * rng.sample::<f64, _>(StandardNormal));
            }
            Ok(FlowStep {
                actnorm,
                invconv,
                coupling,
            })
        })
    }

    pub fn clamp(&self) -> T {
        T::of(self.config.scale_clamp)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let e = self.config.patch_edge;
        if x.channels() != self.config.in_channels || x.spatial() != [e, e, e] {
            return Err(Error::Structure(format!(
                "model expects [{}, {e}³] input, got [{}, {:?}]",
                self.config.in_channels,
                x.channels(),
                x.spatial()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(LatentBundle<T>, T)> {
        self.check_input(x)?;
        let clamp = self.clamp();
        let last = self.params.levels.len() - 1;
        let mut parts = Vec::with_capacity(self.params.levels.len());
        let mut logdet = CompensatedSum::<f64>::new();
        let mut h = x.clone();
        for (l, steps) in self.params.levels.iter().enumerate() {
            h = squeeze(&h)?;
            for step in steps {
                let (a, ld) = step.actnorm.forward(&h);
                logdet.add(ld.f64());
                let (b, ld) = step.invconv.forward(&a);
                logdet.add(ld.f64());
                let (c, ld) = step.coupling.forward(&b, clamp)?;
                logdet.add(ld.f64());
                h = c;
            }
            if l < last {
                let (kept, emitted) = split(&h)?;
                parts.push(emitted);
                h = kept;
            }
        }
        parts.push(h);
        Ok((LatentBundle { parts }, T::of(logdet.value())))
    }

    /// Signs of every hidden pre-activation in every coupling subnet. Two
    /// parameter settings with equal patterns lie on the same linear piece of
    /// the ReLU subnets for this input.
    pub fn relu_pattern(&self, x: &Tensor<T>) -> Result<Vec<bool>> {
        self.check_input(x)?;
        let clamp = self.clamp();
        let last = self.params.levels.len() - 1;
        let mut out = Vec::new();
        let mut h = x.clone();
        for (l, steps) in self.params.levels.iter().enumerate() {
            h = squeeze(&h)?;
            for step in steps {
                let (a, _) = step.actnorm.forward(&h);
                let (b, _) = step.invconv.forward(&a);
                step.coupling.relu_pattern(&b, &mut out);
                h = step.coupling.forward(&b, clamp)?.0;
            }
            if l < last {
                h = split(&h)?.0;
            }
        }
        Ok(out)
    }

    /// Expected latent shapes, in emission order.
    pub fn latent_shapes(&self) -> Vec<(usize, [usize; 3])> {
        let shapes = self.config.level_shapes();
        let last = shapes.len() - 1;
        shapes
            .iter()
            .enumerate()
            .map(|(l, &(c, e))| (if l < last { c / 2 } else { c }, [e; 3]))
            .collect()
    }

    pub fn inverse(&self, z: &LatentBundle<T>) -> Result<Tensor<T>> {
        let expected = self.latent_shapes();
        if z.parts.len() != expected.len()
            || z.parts
                .iter()
                .zip(&expected)
                .any(|(p, &(c, s))| p.channels() != c || p.spatial() != s)
        {
            return Err(Error::Structure(format!(
                "latent bundle shapes do not match the model (expected {expected:?})"
            )));
        }
        let clamp = self.clamp();
        let last = self.params.levels.len() - 1;
        let mut h = z.parts[last].clone();
        for (l, steps) in self.params.levels.iter().enumerate().rev() {
            if l < last {
                h = Tensor::concat(&h, &z.parts[l])?;
            }
            for step in steps.iter().rev() {
                let b = step.coupling.inverse(&h, clamp)?;
                let a = step.invconv.inverse(&b);
                h = step.actnorm.inverse(&a);
            }
            h = unsqueeze(&h)?;
        }
        Ok(h)
    }

    fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.params.visit(&mut |name, _, values| {
            if bad.is_none() && values.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::Numeric {
                step: 0,
                what: format!("parameter tensor {name} is not finite"),
            }),
            None => Ok(()),
        }
    }

    pub fn log_prob(&self, x: &Tensor<T>) -> Result<LogDensity> {
        self.check_finite()?;
        let (z, logdet) = self.forward(x)?;
        let nats = z.prior_log_prob() + logdet.f64();
        Ok(LogDensity::from_nats(nats, self.config.dims()))
    }

    /// Draws every latent element from `N(0, temperature²)` and inverts.
    pub fn sample(&self, temperature: f64, seed: u64) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = self
            .latent_shapes()
            .into_iter()
            .map(|(c, s)| {
                let n = c * s[0] * s[1] * s[2];
                let data = (0..n)
                    .map(|_| T::of(temperature * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                Tensor::from_vec(c, s, data)
            })
            .collect::<Result<Vec<_>>>()?;
        self.inverse(&LatentBundle { parts })
    }

    /// Data-dependent actnorm initialisation, layer by layer through the model.
    pub fn actnorm_init(&mut self, batch: &[Tensor<T>]) -> Result<()> {
        for x in batch {
            self.check_input(x)?;
        }
        let clamp = self.clamp();
        let last = self.params.levels.len() - 1;
        let mut hs = batch.to_vec();
        for (l, steps) in self.params.levels.iter_mut().enumerate() {
            hs = hs.iter().map(squeeze).collect::<Result<Vec<_>>>()?;
            for step in steps.iter_mut() {
                step.actnorm.initialize(&hs)?;
                hs = hs
                    .iter()
                    .map(|h| {
                        let (a, _) = step.actnorm.forward(h);
                        let (b, _) = step.invconv.forward(&a);
                        step.coupling.forward(&b, clamp).map(|(c, _)| c)
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            if l < last {
                hs = hs
                    .iter()
                    .map(|h| split(h).map(|(k, _)| k))
                    .collect::<Result<Vec<_>>>()?;
            }
        }
        Ok(())
    }

    /// Negative log-likelihood of one sample in nats, with its parameter
    /// gradient accumulated into `grads`.
    pub fn nll_backward(&self, x: &Tensor<T>, grads: &mut FlowParams<T>) -> Result<T> {
        self.check_input(x)?;
        let clamp = self.clamp();
        let last = self.params.levels.len() - 1;
        let mut traces: Vec<Vec<StepTrace<T>>> = Vec::with_capacity(self.params.levels.len());
        let mut emitted = Vec::with_capacity(self.params.levels.len());
        let mut logdet = CompensatedSum::<f64>::new();
        let mut h = x.clone();
        for (l, steps) in self.params.levels.iter().enumerate() {
            h = squeeze(&h)?;
            let mut level = Vec::with_capacity(steps.len());
            for step in steps {
                let (a, ld) = step.actnorm.forward(&h);
                logdet.add(ld.f64());
                let (b, ld) = step.invconv.forward(&a);
                logdet.add(ld.f64());
                let (c, ld, cache) = step.coupling.forward_cached(&b, clamp)?;
                logdet.add(ld.f64());
                level.push(StepTrace {
                    actnorm_in: h,
                    invconv_in: a,
                    coupling: cache,
                });
                h = c;
            }
            traces.push(level);
            if l < last {
                let (kept, out) = split(&h)?;
                emitted.push(out);
                h = kept;
            }
        }
        emitted.push(h);

        let mut sq = CompensatedSum::new();
        let mut count = 0usize;
        for part in &emitted {
            count += part.len();
            for &z in part.data() {
                sq.add(z.f64() * z.f64());
            }
        }
        let nll = T::of(0.5 * sq.value() + HALF_LN_2PI * count as f64 - logdet.value());

        // ∂nll/∂z = z for every latent element.
        let mut g = emitted[last].clone();
        for l in (0..=last).rev() {
            if l < last {
                g = Tensor::concat(&g, &emitted[l])?;
            }
            let steps = &self.params.levels[l];
            for (k, step) in steps.iter().enumerate().rev() {
                let trace = &traces[l][k];
                let gstep = &mut grads.levels[l][k];
                g = step
                    .coupling
                    .backward(&trace.coupling, &g, clamp, &mut gstep.coupling)?;
                g = step.invconv.backward(&trace.invconv_in, &g, &mut gstep.invconv);
                g = step.actnorm.backward(&trace.actnorm_in, &g, &mut gstep.actnorm);
            }
            g = unsqueeze(&g)?;
        }
        Ok(nll)
    }

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        FlowModel {
            config: self.config,
            params: self.params.cast(),
        }
    }
}

fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::of(x.f64())).collect()
}

fn cast_conv<T: Real, U: Real>(c: &Conv3d<T>) -> Conv3d<U> {
    Conv3d {
        kernel: c.kernel,
        cin: c.cin,
        cout: c.cout,
        weight: cast_vec(&c.weight),
        bias: cast_vec(&c.bias),
    }
}

impl<T: Real> FlowParams<T> {
    /// Same structure with every value set to zero (frozen fields copied).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_trainable_mut(|_, v| v.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    pub fn cast<U: Real>(&self) -> FlowParams<U> {
        FlowParams {
            levels: self
                .levels
                .iter()
                .map(|steps| {
                    steps
                        .iter()
                        .map(|s| FlowStep {
                            actnorm: ActNorm {
                                log_scale: cast_vec(&s.actnorm.log_scale),
                                bias: cast_vec(&s.actnorm.bias),
                            },
                            invconv: InvConv {
                                perm: s.invconv.perm.clone(),
                                sign: cast_vec(&s.invconv.sign),
                                lower: cast_vec(&s.invconv.lower),
                                upper: cast_vec(&s.invconv.upper),
                                log_s: cast_vec(&s.invconv.log_s),
                            },
                            coupling: Coupling {
                                net_in: cast_conv(&s.coupling.net_in),
                                net_mid: cast_conv(&s.coupling.net_mid),
                                net_out: cast_conv(&s.coupling.net_out),
                            },
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Visits every trainable tensor in a fixed order with its name and shape.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (l, steps) in self.levels.iter().enumerate() {
            for (k, s) in steps.iter().enumerate() {
                let p = format!("l{l}.f{k}");
                let c = s.actnorm.channels();
                f(&format!("{p}.actnorm.log_scale"), &[c], &s.actnorm.log_scale);
                f(&format!("{p}.actnorm.bias"), &[c], &s.actnorm.bias);
                f(&format!("{p}.invconv.lower"), &[c, c], &s.invconv.lower);
                f(&format!("{p}.invconv.upper"), &[c, c], &s.invconv.upper);
                f(&format!("{p}.invconv.log_s"), &[c], &s.invconv.log_s);
                for (name, conv) in [
                    ("in", &s.coupling.net_in),
                    ("mid", &s.coupling.net_mid),
                    ("out", &s.coupling.net_out),
                ] {
                    let k = conv.kernel;
                    f(
                        &format!("{p}.coupling.{name}.weight"),
                        &[k, k, k, conv.cin, conv.cout],
                        &conv.weight,
                    );
                    f(&format!("{p}.coupling.{name}.bias"), &[conv.cout], &conv.bias);
                }
            }
        }
    }

    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(usize, &mut [T])) {
        let mut i = 0;
        for steps in &mut self.levels {
            for s in steps {
                let tensors: [&mut Vec<T>; 11] = [
                    &mut s.actnorm.log_scale,
                    &mut s.actnorm.bias,
                    &mut s.invconv.lower,
                    &mut s.invconv.upper,
                    &mut s.invconv.log_s,
                    &mut s.coupling.net_in.weight,
                    &mut s.coupling.net_in.bias,
                    &mut s.coupling.net_mid.weight,
                    &mut s.coupling.net_mid.bias,
                    &mut s.coupling.net_out.weight,
                    &mut s.coupling.net_out.bias,
                ];
                for t in tensors {
                    f(i, t);
                    i += 1;
                }
            }
        }
    }

    /// All trainable values concatenated in [`visit`](Self::visit) order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    /// Overwrites the trainable values from a flat vector.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::Structure(format!(
                "{} values for {} trainable parameters",
                flat.len(),
                self.num_trainable()
            )));
        }
        let mut at = 0;
        self.for_each_trainable_mut(|_, v| {
            v.copy_from_slice(&flat[at..at + v.len()]);
            at += v.len();
        });
        Ok(())
    }

    /// Element-wise `self += other` over trainable tensors.
    pub fn add_assign(&mut self, other: &FlowParams<T>) {
        let src = other.flatten();
        let mut at = 0;
        self.for_each_trainable_mut(|_, v| {
            for x in v.iter_mut() {
                *x += src[at];
                at += 1;
            }
        });
    }

    pub fn scale(&mut self, factor: T) {
        self.for_each_trainable_mut(|_, v| v.iter_mut().for_each(|x| *x *= factor));
    }
}
