//! Invertible 1×1×1 convolution in LU-factored form.
//!
//! `W = P · L · (U + diag(sign · exp(log_s)))` where `P` is a fixed
//! permutation, `L` is unit lower triangular and `U` strictly upper
//! triangular. `P` and `sign` are frozen at initialisation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct InvConv<T> {
    /// Row `r` of `P·A` is row `perm[r]` of `A`.
    pub perm: Vec<usize>,
    pub sign: Vec<T>,
    /// Row-major `C×C`; only entries strictly below the diagonal are used.
    pub lower: Vec<T>,
    /// Row-major `C×C`; only entries strictly above the diagonal are used.
    pub upper: Vec<T>,
    pub log_s: Vec<T>,
}

/// Partial-pivoting LU of a square row-major matrix: `A[piv[i]] = (L·U)[i]`.
fn lu_decompose(a: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs()))
            .expect("non-empty range");
        if p != k {
            for j in 0..n {
                m.swap(k * n + j, p * n + j);
            }
            piv.swap(k, p);
        }
        let d = m[k * n + k];
        for i in k + 1..n {
            let f = m[i * n + k] / d;
            m[i * n + k] = f;
            for j in k + 1..n {
                m[i * n + j] -= f * m[k * n + j];
            }
        }
    }
    let mut l = vec![0.0; n * n];
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if j < i {
                l[i * n + j] = m[i * n + j];
            } else {
                u[i * n + j] = m[i * n + j];
            }
        }
    }
    (piv, l, u)
}

impl<T: Real> InvConv<T> {
    pub fn identity(channels: usize) -> Self {
        InvConv {
            perm: (0..channels).collect(),
            sign: vec![T::one(); channels],
            lower: vec![T::zero(); channels * channels],
            upper: vec![T::zero(); channels * channels],
            log_s: vec![T::zero(); channels],
        }
    }

    /// LU factors of a Haar-random orthogonal matrix.
    pub fn random_orthogonal<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let n = channels;
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
        let qr = g.qr();
        let (mut q, r) = (qr.q(), qr.r());
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let rows: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| q[(i, j)])
            .collect();
        Self::from_matrix(&rows, n)
    }

    /// Factors an invertible row-major matrix.
    pub fn from_matrix(w: &[f64], n: usize) -> Self {
        let (piv, l, u) = lu_decompose(w, n);
        let mut sign = Vec::with_capacity(n);
        let mut log_s = Vec::with_capacity(n);
        let mut upper = vec![T::zero(); n * n];
        for i in 0..n {
            let d = u[i * n + i];
            sign.push(T::of(d.signum()));
            log_s.push(T::of(d.abs().ln()));
            for j in i + 1..n {
                upper[i * n + j] = T::of(u[i * n + j]);
            }
        }
        let mut perm = vec![0; n];
        for (i, &p) in piv.iter().enumerate() {
            perm[p] = i;
        }
        InvConv {
            perm,
            sign,
            lower: l.into_iter().map(T::of).collect(),
            upper,
            log_s,
        }
    }

    pub fn channels(&self) -> usize {
        self.perm.len()
    }

    /// `U + diag(sign · exp(log_s))`, row-major.
    fn upper_with_diag(&self) -> Vec<T> {
        let n = self.channels();
        let mut u = vec![T::zero(); n * n];
        for i in 0..n {
            u[i * n + i] = self.sign[i] * self.log_s[i].exp();
            for j in i + 1..n {
                u[i * n + j] = self.upper[i * n + j];
            }
        }
        u
    }

    /// `L·U'` before the row permutation, row-major.
    fn unpermuted(&self, u: &[T]) -> Vec<T> {
        let n = self.channels();
        let mut a = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                // (L·U')[i][j] = U'[i][j] + Σ_{k<i} L[i][k]·U'[k][j]
                let mut acc = u[i * n + j];
                for k in 0..i.min(j + 1) {
                    acc += self.lower[i * n + k] * u[k * n + j];
                }
                a[i * n + j] = acc;
            }
        }
        a
    }

    /// The full `C×C` mixing matrix, row-major.
    pub fn weight(&self) -> Vec<T> {
        let n = self.channels();
        let a = self.unpermuted(&self.upper_with_diag());
        let mut w = vec![T::zero(); n * n];
        for r in 0..n {
            w[r * n..(r + 1) * n].copy_from_slice(&a[self.perm[r] * n..(self.perm[r] + 1) * n]);
        }
        w
    }

    pub fn logdet(&self, voxels: usize) -> T {
        T::of(voxels as f64) * self.log_s.iter().copied().sum::<T>()
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, T) {
        let n = self.channels();
        let w = self.weight();
        let mut y = Tensor::zeros(n, x.spatial());
        for (yv, xv) in y.data_mut().chunks_exact_mut(n).zip(x.data().chunks_exact(n)) {
            for r in 0..n {
                let row = &w[r * n..(r + 1) * n];
                yv[r] = row.iter().zip(xv).map(|(&a, &b)| a * b).sum();
            }
        }
        (y, self.logdet(x.voxels()))
    }

    /// Solves the permuted triangular systems voxel by voxel.
    pub fn inverse(&self, y: &Tensor<T>) -> Tensor<T> {
        let n = self.channels();
        let u = self.upper_with_diag();
        let mut x = Tensor::zeros(n, y.spatial());
        let mut buf = vec![T::zero(); n];
        for (xv, yv) in x.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
            for r in 0..n {
                buf[self.perm[r]] = yv[r];
            }
            for i in 0..n {
                let mut acc = buf[i];
                for k in 0..i {
                    acc -= self.lower[i * n + k] * buf[k];
                }
                buf[i] = acc;
            }
            for i in (0..n).rev() {
                let mut acc = buf[i];
                for k in i + 1..n {
                    acc -= u[i * n + k] * xv[k];
                }
                xv[i] = acc / u[i * n + i];
            }
        }
        x
    }

    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grad: &mut InvConv<T>) -> Tensor<T> {
        let n = self.channels();
        let u = self.upper_with_diag();
        let w = self.weight();
        let mut gw = vec![T::zero(); n * n];
        let mut gx = Tensor::zeros(n, x.spatial());
        for ((gxv, gyv), xv) in gx
            .data_mut()
            .chunks_exact_mut(n)
            .zip(gy.data().chunks_exact(n))
            .zip(x.data().chunks_exact(n))
        {
            for r in 0..n {
                let g = gyv[r];
                let row = &w[r * n..(r + 1) * n];
                let grow = &mut gw[r * n..(r + 1) * n];
                for j in 0..n {
                    grow[j] += g * xv[j];
                    gxv[j] += g * row[j];
                }
            }
        }
        // W = P·A with A = L·U'.
        let mut ga = vec![T::zero(); n * n];
        for r in 0..n {
            let src = self.perm[r];
            ga[src * n..(src + 1) * n].copy_from_slice(&gw[r * n..(r + 1) * n]);
        }
        // ∂/∂L = gA·U'ᵀ (strictly lower part)
        for i in 0..n {
            for j in 0..i {
                let mut acc = T::zero();
                for k in j..n {
                    acc += ga[i * n + k] * u[j * n + k];
                }
                grad.lower[i * n + j] += acc;
            }
        }
        // ∂/∂U' = Lᵀ·gA with L unit lower triangular.
        let voxels = T::of(x.voxels() as f64);
        for i in 0..n {
            for j in i..n {
                let mut acc = ga[i * n + j];
                for k in i + 1..n {
                    acc += self.lower[k * n + i] * ga[k * n + j];
                }
                if i == j {
                    grad.log_s[i] += acc * u[i * n + i] - voxels;
                } else {
                    grad.upper[i * n + j] += acc;
                }
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lu_reconstructs_pivoted_matrix() {
        let a = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let c = InvConv::<f64>::from_matrix(&a, 3);
        let w = c.weight();
        for (x, y) in w.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn random_orthogonal_has_zero_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = InvConv::<f64>::random_orthogonal(6, &mut rng);
        assert!(c.logdet(1).abs() < 1e-10);
        let w = c.weight();
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..6).map(|k| w[i * 6 + k] * w[j * 6 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_params_are_identity() {
        let c = InvConv::<f64>::identity(3);
        let x = Tensor::from_vec(3, [1, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (y, ld) = c.forward(&x);
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn two_by_two_logdet_matches_cofactor() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let mut c = InvConv::<f64>::random_orthogonal(2, &mut rng);
            c.lower[2] = rng.random_range(-1.0..1.0);
            c.upper[1] = rng.random_range(-1.0..1.0);
            c.log_s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let w = c.weight();
            let det = w[0] * w[3] - w[1] * w[2];
            assert!((c.logdet(1) - det.abs().ln()).abs() < 1e-12);
        }
    }
}
