//! Dense scalar volumes and binary masks.
//!
//! Voxels are stored z-major: z is the slowest axis and x the fastest, the same
//! order used on disk by [`crate::rvol`].

use crate::error::{Error, Result};

/// Voxel counts along (z, y, x).
pub type Dims = [usize; 3];

/// Voxel edge lengths in millimetres along (z, y, x).
pub type Spacing = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueSpace {
    /// Raw attenuation in Hounsfield units.
    Hu,
    /// Clipped and rescaled into `[-0.5, 0.5]`.
    Normalized,
    /// A per-voxel log-likelihood map.
    LogPMap,
}

impl ValueSpace {
    pub fn code(self) -> u8 {
        match self {
            ValueSpace::Hu => 0,
            ValueSpace::Normalized => 1,
            ValueSpace::LogPMap => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ValueSpace::Hu),
            1 => Some(ValueSpace::Normalized),
            2 => Some(ValueSpace::LogPMap),
            _ => None,
        }
    }
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    voxels: Vec<f32>,
    value_space: ValueSpace,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<f32>, value_space: ValueSpace) -> Result<Self> {
        let v = Volume {
            dims,
            spacing,
            voxels,
            value_space,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32, value_space: ValueSpace) -> Result<Self> {
        Self::new(dims, spacing, vec![value; voxel_count(dims)], value_space)
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        value_space: ValueSpace,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    voxels.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, spacing, voxels, value_space)
    }

    /// Checks every structural and value invariant of the volume.
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Validation(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.voxels.len() != voxel_count(self.dims) {
            return Err(Error::Validation(format!(
                "{} voxels for dims {:?}",
                self.voxels.len(),
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!(
                "spacing must be positive and finite, got {:?}",
                self.spacing
            )));
        }
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite voxel at index {i}")));
        }
        if self.value_space == ValueSpace::Normalized {
            if let Some(i) = self.voxels.iter().position(|&v| !(-0.5..=0.5).contains(&v)) {
                return Err(Error::Validation(format!(
                    "normalized voxel {} at index {i} outside [-0.5, 0.5]",
                    self.voxels[i]
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn value_space(&self) -> ValueSpace {
        self.value_space
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[linear_index(self.dims, z, y, x)]
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        voxel_volume_mm3(self.spacing)
    }

    /// Copies out the cube of edge `edge` whose lowest corner is `origin`.
    pub fn extract_cube(&self, origin: [usize; 3], edge: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(edge * edge * edge);
        for z in origin[0]..origin[0] + edge {
            for y in origin[1]..origin[1] + edge {
                let start = linear_index(self.dims, z, y, origin[2]);
                out.extend_from_slice(&self.voxels[start..start + edge]);
            }
        }
        out
    }
}

pub fn voxel_volume_mm3(spacing: Spacing) -> f64 {
    spacing.iter().map(|&s| s as f64).product()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != voxel_count(dims) {
            return Err(Error::Validation(format!(
                "{} mask bits for dims {:?}",
                bits.len(),
                dims
            )));
        }
        Ok(Mask { dims, bits })
    }

    pub fn empty(dims: Dims) -> Self {
        Mask {
            dims,
            bits: vec![false; voxel_count(dims)],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Mask {
            dims,
            bits: vec![true; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.bits[linear_index(self.dims, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: bool) {
        let i = linear_index(self.dims, z, y, x);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// True when every voxel set here is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn ensure_matches(&self, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Validation(format!(
                "mask dims {:?} do not match volume dims {:?}",
                self.dims, dims
            )));
        }
        Ok(())
    }

    /// Sørensen–Dice overlap with another mask of the same shape.
    pub fn dice(&self, other: &Mask) -> f64 {
        let inter = self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count();
        let total = self.count() + other.count();
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_voxel_count() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7], ValueSpace::Hu).is_err());
    }

    #[test]
    fn rejects_non_positive_spacing() {
        assert!(Volume::filled([2, 2, 2], [1.0, 0.0, 1.0], 0.0, ValueSpace::Hu).is_err());
    }

    #[test]
    fn normalized_range_enforced() {
        assert!(Volume::filled([1, 1, 1], [1.0; 3], 0.5, ValueSpace::Normalized).is_ok());
        assert!(Volume::filled([1, 1, 1], [1.0; 3], 0.51, ValueSpace::Normalized).is_err());
    }

    #[test]
    fn extract_cube_reads_z_major() {
        let v = Volume::from_fn([3, 3, 3], [1.0; 3], ValueSpace::Hu, |z, y, x| {
            (9 * z + 3 * y + x) as f32
        })
        .unwrap();
        let cube = v.extract_cube([1, 1, 1], 2);
        assert_eq!(cube, vec![13.0, 14.0, 16.0, 17.0, 22.0, 23.0, 25.0, 26.0]);
    }

    #[test]
    fn dice_of_identical_masks_is_one() {
        let mut m = Mask::empty([2, 2, 2]);
        m.set(0, 1, 1, true);
        assert_eq!(m.dice(&m.clone()), 1.0);
        assert_eq!(m.dice(&Mask::empty([2, 2, 2])), 0.0);
    }
}
