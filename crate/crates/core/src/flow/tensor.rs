use crate::error::{Error, Result};
use crate::real::Real;

/// A `[C, D, H, W]` activation stored channel-last: all channels of one voxel
/// are contiguous, voxels are z-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    spatial: [usize; 3],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, spatial: [usize; 3]) -> Self {
        Tensor {
            channels,
            spatial,
            data: vec![T::zero(); channels * spatial[0] * spatial[1] * spatial[2]],
        }
    }

    pub fn from_vec(channels: usize, spatial: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = channels * spatial[0] * spatial[1] * spatial[2];
        if data.len() != n {
            return Err(Error::Structure(format!(
                "{} values for tensor of shape [{channels}, {spatial:?}]",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            spatial,
            data,
        })
    }

    /// A single-channel cube from z-major patch values.
    pub fn from_patch(values: &[f32], edge: usize) -> Result<Self> {
        Self::from_vec(1, [edge; 3], values.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.spatial
    }

    pub fn voxels(&self) -> usize {
        self.spatial[0] * self.spatial[1] * self.spatial[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        let v = (z * self.spatial[1] + y) * self.spatial[2] + x;
        self.data[v * self.channels + c]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.channels == other.channels && self.spatial == other.spatial
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            spatial: self.spatial,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max)
    }

    /// Channels `[from, to)` as a new tensor.
    pub fn channel_range(&self, from: usize, to: usize) -> Tensor<T> {
        let c = to - from;
        let mut out = Vec::with_capacity(c * self.voxels());
        for v in self.data.chunks_exact(self.channels) {
            out.extend_from_slice(&v[from..to]);
        }
        Tensor {
            channels: c,
            spatial: self.spatial,
            data: out,
        }
    }

    /// Channel-wise concatenation `[a, b]`.
    pub fn concat(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.spatial != b.spatial {
            return Err(Error::Structure(format!(
                "cannot concatenate spatial shapes {:?} and {:?}",
                a.spatial, b.spatial
            )));
        }
        let c = a.channels + b.channels;
        let mut out = Vec::with_capacity(c * a.voxels());
        for (va, vb) in a.data.chunks_exact(a.channels).zip(b.data.chunks_exact(b.channels)) {
            out.extend_from_slice(va);
            out.extend_from_slice(vb);
        }
        Ok(Tensor {
            channels: c,
            spatial: a.spatial,
            data: out,
        })
    }
}
