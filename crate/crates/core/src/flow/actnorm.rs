//! Per-channel affine normalisation with data-dependent initialisation.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm<T> {
    pub log_scale: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ActNorm<T> {
    pub fn identity(channels: usize) -> Self {
        ActNorm {
            log_scale: vec![T::zero(); channels],
            bias: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    /// `y = exp(log_scale)·x + bias`; log-determinant `voxels · Σ log_scale`.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, T) {
        let scale: Vec<T> = self.log_scale.iter().map(|s| s.exp()).collect();
        let mut y = x.clone();
        for v in y.data_mut().chunks_exact_mut(self.channels()) {
            for ((e, &s), &b) in v.iter_mut().zip(&scale).zip(&self.bias) {
                *e = s * *e + b;
            }
        }
        (y, self.logdet(x.voxels()))
    }

    pub fn logdet(&self, voxels: usize) -> T {
        T::of(voxels as f64) * self.log_scale.iter().copied().sum::<T>()
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Tensor<T> {
        let inv: Vec<T> = self.log_scale.iter().map(|s| (-*s).exp()).collect();
        let mut x = y.clone();
        for v in x.data_mut().chunks_exact_mut(self.channels()) {
            for ((e, &s), &b) in v.iter_mut().zip(&inv).zip(&self.bias) {
                *e = (*e - b) * s;
            }
        }
        x
    }

    /// Backpropagates `gy = ∂J/∂y` for `J = (…) − logdet`, accumulating
    /// parameter gradients into `grad`.
    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grad: &mut ActNorm<T>) -> Tensor<T> {
        let c = self.channels();
        let scale: Vec<T> = self.log_scale.iter().map(|s| s.exp()).collect();
        let mut gx = gy.clone();
        let mut gls = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for (g, xv) in gx.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
            for ch in 0..c {
                gb[ch] += g[ch];
                gls[ch] += g[ch] * xv[ch] * scale[ch];
                g[ch] *= scale[ch];
            }
        }
        let n = T::of(x.voxels() as f64);
        for ch in 0..c {
            grad.log_scale[ch] += gls[ch] - n;
            grad.bias[ch] += gb[ch];
        }
        gx
    }

    /// Sets the parameters so that the batch comes out with zero mean and unit
    /// (population) variance per channel.
    pub fn initialize(&mut self, batch: &[Tensor<T>]) -> Result<()> {
        if batch.len() < 2 {
            return Err(Error::Init(format!("need at least 2 samples, got {}", batch.len())));
        }
        let c = self.channels();
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for t in batch {
            for v in t.data().chunks_exact(c) {
                for ch in 0..c {
                    sum[ch] += v[ch].f64();
                }
            }
            count += t.voxels();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; c];
        for t in batch {
            for v in t.data().chunks_exact(c) {
                for ch in 0..c {
                    sq[ch] += (v[ch].f64() - mean[ch]).powi(2);
                }
            }
        }
        for ch in 0..c {
            let var = sq[ch] / count as f64;
            if !(var > 1e-24) || !var.is_finite() {
                return Err(Error::Init(format!(
                    "channel {ch} has variance {var:e}; the data looks degenerate"
                )));
            }
            let ls = -0.5 * var.ln();
            self.log_scale[ch] = T::of(ls);
            self.bias[ch] = T::of(-mean[ch] * ls.exp());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(c: usize, vals: Vec<f64>) -> Tensor<f64> {
        let n = vals.len() / c;
        Tensor::from_vec(c, [1, 1, n], vals).unwrap()
    }

    #[test]
    fn zero_params_are_identity() {
        let a = ActNorm::<f64>::identity(2);
        let x = t(2, vec![1.0, -2.0, 3.0, 0.5]);
        let (y, ld) = a.forward(&x);
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn init_of_scaled_standard_batch_gives_minus_ln2() {
        // Each channel of the standard batch is exactly zero-mean, unit-variance.
        let std = [1.0, -1.0, 1.0, -1.0];
        let b1 = t(1, std.iter().map(|v| 2.0 * v).collect());
        let b2 = t(1, std.iter().map(|v| -2.0 * v).collect());
        let mut a = ActNorm::<f64>::identity(1);
        a.initialize(&[b1, b2]).unwrap();
        assert!((a.log_scale[0] + std::f64::consts::LN_2).abs() < 1e-12);
        assert!(a.bias[0].abs() < 1e-12);
    }

    #[test]
    fn constant_batch_is_init_error() {
        let mut a = ActNorm::<f64>::identity(1);
        let b = t(1, vec![0.3; 8]);
        assert!(matches!(a.initialize(&[b.clone(), b]), Err(Error::Init(_))));
        let mut a = ActNorm::<f64>::identity(1);
        assert!(a.initialize(&[t(1, vec![0.0, 1.0])]).is_err());
    }
}
