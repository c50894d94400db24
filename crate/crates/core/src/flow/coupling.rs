//! Affine coupling with a small 3D convolutional subnet.
//!
//! The first half of the channels passes through unchanged and conditions a
//! scale and shift for the second half. The raw log-scale is soft-clamped as
//! `α·tanh(raw/α)`, so a zero subnet output is exactly the identity.

use rand::Rng;

use super::conv::Conv3d;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::{CompensatedSum, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling<T> {
    /// 3×3×3, C/2 → hidden.
    pub net_in: Conv3d<T>,
    /// 1×1×1, hidden → hidden.
    pub net_mid: Conv3d<T>,
    /// 3×3×3, hidden → C (log-scale channels, then shift channels).
    pub net_out: Conv3d<T>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CouplingCache<T> {
    xa: Tensor<T>,
    xb: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    raw: Tensor<T>,
}

fn relu_in_place<T: Real>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

fn relu_mask<T: Real>(g: &mut Tensor<T>, activation: &Tensor<T>) {
    for (gv, &a) in g.data_mut().iter_mut().zip(activation.data()) {
        if a <= T::zero() {
            *gv = T::zero();
        }
    }
}

impl<T: Real> Coupling<T> {
    fn check_channels(channels: usize) -> Result<()> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::Structure(format!(
                "coupling needs an even channel count >= 2, got {channels}"
            )));
        }
        Ok(())
    }

    /// Subnet with every weight zero: the coupling is the identity.
    pub fn zeros(channels: usize, hidden: usize) -> Result<Self> {
        Self::check_channels(channels)?;
        let half = channels / 2;
        Ok(Coupling {
            net_in: Conv3d::zeros(3, half, hidden),
            net_mid: Conv3d::zeros(1, hidden, hidden),
            net_out: Conv3d::zeros(3, hidden, channels),
        })
    }

    /// Training initialisation: Gaussian hidden layers, zero output layer.
    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut c = Self::zeros(channels, hidden)?;
        let half = channels / 2;
        c.net_in = Conv3d::random(3, half, hidden, (1.0 / (27.0 * half as f64)).sqrt(), rng);
        c.net_mid = Conv3d::random(1, hidden, hidden, (1.0 / hidden as f64).sqrt(), rng);
        Ok(c)
    }

    pub fn channels(&self) -> usize {
        self.net_out.cout
    }

    fn subnet(&self, xa: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let mut a1 = self.net_in.forward(xa);
        relu_in_place(&mut a1);
        let mut a2 = self.net_mid.forward(&a1);
        relu_in_place(&mut a2);
        let raw = self.net_out.forward(&a2);
        (a1, a2, raw)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::Structure(format!(
                "coupling built for {} channels got {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Appends the sign pattern of both hidden pre-activations for input `x`.
    pub fn relu_pattern(&self, x: &Tensor<T>, out: &mut Vec<bool>) {
        let xa = x.channel_range(0, self.channels() / 2);
        let mut a1 = self.net_in.forward(&xa);
        out.extend(a1.data().iter().map(|&v| v > T::zero()));
        relu_in_place(&mut a1);
        let a2 = self.net_mid.forward(&a1);
        out.extend(a2.data().iter().map(|&v| v > T::zero()));
    }

    pub fn forward(&self, x: &Tensor<T>, clamp: T) -> Result<(Tensor<T>, T)> {
        let (y, ld, _) = self.forward_cached(x, clamp)?;
        Ok((y, ld))
    }

    pub fn forward_cached(&self, x: &Tensor<T>, clamp: T) -> Result<(Tensor<T>, T, CouplingCache<T>)> {
        self.check_input(x)?;
        let c = self.channels();
        let half = c / 2;
        let xa = x.channel_range(0, half);
        let xb = x.channel_range(half, c);
        let (a1, a2, raw) = self.subnet(&xa);
        let mut yb = xb.clone();
        let mut logdet = CompensatedSum::new();
        for (yv, rv) in yb.data_mut().chunks_exact_mut(half).zip(raw.data().chunks_exact(c)) {
            for j in 0..half {
                let ls = clamp * (rv[j] / clamp).tanh();
                logdet.add(ls);
                yv[j] = ls.exp() * yv[j] + rv[half + j];
            }
        }
        let y = Tensor::concat(&xa, &yb)?;
        Ok((y, logdet.value(), CouplingCache { xa, xb, a1, a2, raw }))
    }

    pub fn inverse(&self, y: &Tensor<T>, clamp: T) -> Result<Tensor<T>> {
        self.check_input(y)?;
        let c = self.channels();
        let half = c / 2;
        let ya = y.channel_range(0, half);
        let mut xb = y.channel_range(half, c);
        let (_, _, raw) = self.subnet(&ya);
        for (xv, rv) in xb.data_mut().chunks_exact_mut(half).zip(raw.data().chunks_exact(c)) {
            for j in 0..half {
                let ls = clamp * (rv[j] / clamp).tanh();
                xv[j] = (xv[j] - rv[half + j]) * (-ls).exp();
            }
        }
        Tensor::concat(&ya, &xb)
    }

    /// Backpropagates `gy` for `J = (…) − logdet`.
    pub fn backward(
        &self,
        cache: &CouplingCache<T>,
        gy: &Tensor<T>,
        clamp: T,
        grad: &mut Coupling<T>,
    ) -> Result<Tensor<T>> {
        let c = self.channels();
        let half = c / 2;
        let gya = gy.channel_range(0, half);
        let mut gxb = gy.channel_range(half, c);
        let mut graw = Tensor::zeros(c, gy.spatial());
        for (((gb, xb), rv), gr) in gxb
            .data_mut()
            .chunks_exact_mut(half)
            .zip(cache.xb.data().chunks_exact(half))
            .zip(cache.raw.data().chunks_exact(c))
            .zip(graw.data_mut().chunks_exact_mut(c))
        {
            for j in 0..half {
                let th = (rv[j] / clamp).tanh();
                let s = (clamp * th).exp();
                let g = gb[j];
                let gls = g * s * xb[j] - T::one();
                gr[j] = gls * (T::one() - th * th);
                gr[half + j] = g;
                gb[j] = g * s;
            }
        }
        let mut g2 = self
            .net_out
            .backward(&cache.a2, &graw, &mut grad.net_out, true)
            .expect("input gradient requested");
        relu_mask(&mut g2, &cache.a2);
        let mut g1 = self
            .net_mid
            .backward(&cache.a1, &g2, &mut grad.net_mid, true)
            .expect("input gradient requested");
        relu_mask(&mut g1, &cache.a1);
        let gxa_net = self
            .net_in
            .backward(&cache.xa, &g1, &mut grad.net_in, true)
            .expect("input gradient requested");
        let mut gxa = gya;
        for (a, &b) in gxa.data_mut().iter_mut().zip(gxa_net.data()) {
            *a += b;
        }
        Tensor::concat(&gxa, &gxb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn odd_channels_rejected() {
        assert!(matches!(Coupling::<f64>::zeros(3, 4), Err(Error::Structure(_))));
        assert!(Coupling::<f64>::zeros(1, 4).is_err());
    }

    #[test]
    fn zero_output_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Coupling::<f64>::init(4, 8, &mut rng).unwrap();
        let x = Tensor::from_vec(4, [2, 2, 2], (0..32).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let (y, ld) = c.forward(&x, 2.0).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn round_trip_with_random_subnet() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Coupling::<f64>::init(2, 6, &mut rng).unwrap();
        c.net_out = Conv3d::random(3, 6, 2, 0.5, &mut rng);
        let x = Tensor::from_vec(2, [3, 3, 3], (0..54).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let (y, _) = c.forward(&x, 2.0).unwrap();
        let back = c.inverse(&y, 2.0).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }
}
