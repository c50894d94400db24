//! Same-padded 3D convolution with kernel 1 or 3, on channel-last tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<T> {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    /// `[tap][cin][cout]` with taps in (kz, ky, kx) raster order.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn zeros(kernel: usize, cin: usize, cout: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Conv3d {
            kernel,
            cin,
            cout,
            weight: vec![T::zero(); kernel.pow(3) * cin * cout],
            bias: vec![T::zero(); cout],
        }
    }

    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn random<R: Rng + ?Sized>(kernel: usize, cin: usize, cout: usize, std: f64, rng: &mut R) -> Self {
        let mut c = Self::zeros(kernel, cin, cout);
        for w in &mut c.weight {
            *w = T::of(std * rng.sample::<f64, _>(StandardNormal));
        }
        c
    }

    pub fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    /// Calls `f(out_voxel, in_voxel, tap)` for every in-bounds kernel tap.
    #[inline]
    fn for_each_tap(&self, spatial: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        let pad = k / 2;
        let [d, h, w] = spatial;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let ov = (z * h + y) * w + x;
                    for kz in 0..k {
                        let iz = z + kz;
                        if iz < pad || iz - pad >= d {
                            continue;
                        }
                        let iz = iz - pad;
                        for ky in 0..k {
                            let iy = y + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..k {
                                let ix = x + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let iv = (iz * h + iy) * w + ix - pad;
                                f(ov, iv, (kz * k + ky) * k + kx);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Rows of `[tap][channel]` input values per output voxel, zero where
    /// the kernel reaches past the border.
    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let c = x.channels();
        let width = self.taps() * c;
        let mut col = vec![T::zero(); x.voxels() * width];
        let xd = x.data();
        self.for_each_tap(x.spatial(), |ov, iv, tap| {
            let dst = ov * width + tap * c;
            col[dst..dst + c].copy_from_slice(&xd[iv * c..(iv + 1) * c]);
        });
        col
    }

    /// `out += correlate(x, weight)` for a `[tap][x.channels()][cout]` weight.
    fn correlate(&self, x: &Tensor<T>, weight: &[T], cout: usize, out: &mut [T]) {
        let width = self.taps() * x.channels();
        let col;
        let input = if self.kernel == 1 {
            x.data()
        } else {
            col = self.im2col(x);
            &col[..]
        };
        T::gemm(
            x.voxels(),
            width,
            cout,
            input,
            (width, 1),
            weight,
            (cout, 1),
            T::one(),
            out,
            (cout, 1),
        );
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.channels(), self.cin);
        let mut out = Tensor::zeros(self.cout, x.spatial());
        for chunk in out.data_mut().chunks_exact_mut(self.cout) {
            chunk.copy_from_slice(&self.bias);
        }
        self.correlate(x, &self.weight, self.cout, out.data_mut());
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        gout: &Tensor<T>,
        grad: &mut Conv3d<T>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let (cin, cout) = (self.cin, self.cout);
        let width = self.taps() * cin;
        for g in gout.data().chunks_exact(cout) {
            for (b, &gv) in grad.bias.iter_mut().zip(g) {
                *b += gv;
            }
        }
        let col;
        let input = if self.kernel == 1 {
            x.data()
        } else {
            col = self.im2col(x);
            &col[..]
        };
        // gW += colᵀ · G
        T::gemm(
            width,
            x.voxels(),
            cout,
            input,
            (1, width),
            gout.data(),
            (cout, 1),
            T::one(),
            &mut grad.weight,
            (cout, 1),
        );
        if !want_input {
            return None;
        }
        let mut gin = Tensor::zeros(cin, x.spatial());
        if self.kernel == 1 || cout >= cin {
            // gcol = G · Wᵀ, scattered back onto the input voxels.
            let mut gcol = vec![T::zero(); x.voxels() * width];
            T::gemm(
                x.voxels(),
                cout,
                width,
                gout.data(),
                (cout, 1),
                &self.weight,
                (1, cout),
                T::zero(),
                &mut gcol,
                (width, 1),
            );
            if self.kernel == 1 {
                return Some(Tensor::from_vec(cin, x.spatial(), gcol).expect("shape preserved"));
            }
            let gi = gin.data_mut();
            self.for_each_tap(x.spatial(), |ov, iv, tap| {
                let src = &gcol[ov * width + tap * cin..ov * width + (tap + 1) * cin];
                for (d, &s) in gi[iv * cin..(iv + 1) * cin].iter_mut().zip(src) {
                    *d += s;
                }
            });
        } else {
            // Narrow outputs: correlate G with the tap-flipped, channel-transposed kernel.
            let taps = self.taps();
            let mut flipped = vec![T::zero(); self.weight.len()];
            for t in 0..taps {
                let src = taps - 1 - t;
                for ci in 0..cin {
                    for co in 0..cout {
                        flipped[(t * cout + co) * cin + ci] = self.weight[(src * cin + ci) * cout + co];
                    }
                }
            }
            self.correlate(gout, &flipped, cin, gin.data_mut());
        }
        Some(gin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct textbook convolution on a `[C][D][H][W]` view.
    fn reference(conv: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [d, h, w] = x.spatial();
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    for co in 0..conv.cout {
                        let mut acc = conv.bias[co];
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (iz, iy, ix) =
                                        (z as isize + kz - pad, y as isize + ky - pad, xx as isize + kx - pad);
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= w as isize
                                    {
                                        continue;
                                    }
                                    let tap = ((kz * k + ky) * k + kx) as usize;
                                    for ci in 0..conv.cin {
                                        acc += conv.weight[(tap * conv.cin + ci) * conv.cout + co]
                                            * x.at(ci, iz as usize, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Tensor::from_vec(conv.cout, x.spatial(), out).unwrap()
    }

    fn random_tensor(c: usize, s: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = c * s[0] * s[1] * s[2];
        Tensor::from_vec(c, s, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let conv = Conv3d::<f64>::random(k, 3, 5, 0.3, &mut rng);
            let mut conv = conv;
            conv.bias = (0..5).map(|i| i as f64 * 0.1).collect();
            let x = random_tensor(3, [3, 4, 5], &mut rng);
            assert!(conv.forward(&x).max_abs_diff(&reference(&conv, &x)) < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <gout, conv(x) - b> = <x, gin> and = <w, gw> since conv is bilinear.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv3d::<f64>::random(3, 2, 4, 0.5, &mut rng);
        let x = random_tensor(2, [4, 3, 4], &mut rng);
        let gout = random_tensor(4, [4, 3, 4], &mut rng);
        let y = conv.forward(&x);
        let lhs: f64 = y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum();
        let mut grad = Conv3d::zeros(3, 2, 4);
        let gin = conv.backward(&x, &gout, &mut grad, true).unwrap();
        let via_input: f64 = x.data().iter().zip(gin.data()).map(|(a, b)| a * b).sum();
        let via_weight: f64 = conv.weight.iter().zip(&grad.weight).map(|(a, b)| a * b).sum();
        assert!((lhs - via_input).abs() < 1e-10);
        assert!((lhs - via_weight).abs() < 1e-10);
        let bias_sum: f64 = gout.data().iter().sum();
        assert!((grad.bias.iter().sum::<f64>() - bias_sum).abs() < 1e-10);
    }
}
