use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the flow is generic over (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `c = a·b + beta·c` for an `m×k` by `k×n` product. Each matrix is given
    /// with its (row, column) strides in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! gemm_impl {
    ($kernel:path) => {
        #[inline]
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            a_strides: (usize, usize),
            b: &[Self],
            b_strides: (usize, usize),
            beta: Self,
            c: &mut [Self],
            c_strides: (usize, usize),
        ) {
            assert!(a.len() >= span(m, k, a_strides), "gemm: a too short");
            assert!(b.len() >= span(k, n, b_strides), "gemm: b too short");
            assert!(c.len() >= span(m, n, c_strides), "gemm: c too short");
            // SAFETY: the assertions above keep every strided access in bounds,
            // and `c` is a unique borrow that cannot alias `a` or `b`.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    a_strides.0 as isize,
                    a_strides.1 as isize,
                    b.as_ptr(),
                    b_strides.0 as isize,
                    b_strides.1 as isize,
                    beta,
                    c.as_mut_ptr(),
                    c_strides.0 as isize,
                    c_strides.1 as isize,
                )
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    gemm_impl!(matrixmultiply::sgemm);
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    gemm_impl!(matrixmultiply::dgemm);
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    comp: T,
}

impl<T: Real> CompensatedSum<T> {
    pub fn new() -> Self {
        CompensatedSum {
            sum: T::zero(),
            comp: T::zero(),
        }
    }

    #[inline]
    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.comp
    }
}

impl<T: Real> FromIterator<T> for CompensatedSum<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let s: CompensatedSum<f64> = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 2.0);
        let naive: f64 = [1.0, 1e100, 1.0, -1e100].iter().sum();
        assert_eq!(naive, 0.0);
    }
}
