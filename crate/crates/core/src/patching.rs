//! Training-patch sampling and the overlapping inference grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Mask, Volume};

pub type Origin = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: Origin,
    pub edge: usize,
    /// `edge³` normalised values, z-major.
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub patch_edge: usize,
    pub overlap: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            patch_edge: 48,
            overlap: 10,
        }
    }
}

impl GridSpec {
    pub fn new(patch_edge: usize, overlap: usize) -> Result<Self> {
        let g = GridSpec { patch_edge, overlap };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_edge == 0 || self.overlap >= self.patch_edge {
            return Err(Error::Grid(format!(
                "need 0 <= overlap < patch_edge, got overlap {} and edge {}",
                self.overlap, self.patch_edge
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.patch_edge - self.overlap
    }
}

/// Patch start positions along one axis of length `dim`.
pub fn axis_positions(dim: usize, g: &GridSpec) -> Result<Vec<usize>> {
    g.validate()?;
    if dim < g.patch_edge {
        return Err(Error::Grid(format!(
            "axis of {dim} voxels is shorter than patch edge {}",
            g.patch_edge
        )));
    }
    let last = dim - g.patch_edge;
    let mut out: Vec<usize> = (0..=last).step_by(g.stride()).collect();
    if *out.last().expect("0 is always present") != last {
        out.push(last);
    }
    Ok(out)
}

/// Cartesian product of the per-axis positions, in lexicographic (z, y, x) order.
pub fn inference_grid(dims: Dims, g: &GridSpec) -> Result<Vec<Origin>> {
    let pz = axis_positions(dims[0], g)?;
    let py = axis_positions(dims[1], g)?;
    let px = axis_positions(dims[2], g)?;
    let mut out = Vec::with_capacity(pz.len() * py.len() * px.len());
    for &z in &pz {
        for &y in &py {
            for &x in &px {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

/// Summed-area table over a mask, padded by one on the low side of every axis.
struct IntegralMask {
    dims: Dims,
    table: Vec<u32>,
}

impl IntegralMask {
    fn new(mask: &Mask) -> Self {
        let d = mask.dims();
        let pd = [d[0] + 1, d[1] + 1, d[2] + 1];
        let mut table = vec![0u32; pd[0] * pd[1] * pd[2]];
        let idx = |z: usize, y: usize, x: usize| (z * pd[1] + y) * pd[2] + x;
        for z in 1..pd[0] {
            for y in 1..pd[1] {
                for x in 1..pd[2] {
                    let v = mask.get(z - 1, y - 1, x - 1) as u32;
                    table[idx(z, y, x)] =
                        v + table[idx(z - 1, y, x)] + table[idx(z, y - 1, x)] + table[idx(z, y, x - 1)]
                            - table[idx(z - 1, y - 1, x)]
                            - table[idx(z - 1, y, x - 1)]
                            - table[idx(z, y - 1, x - 1)]
                            + table[idx(z - 1, y - 1, x - 1)];
                }
            }
        }
        IntegralMask { dims: pd, table }
    }

    fn cube_sum(&self, o: Origin, e: usize) -> u32 {
        let pd = self.dims;
        let t = |z: usize, y: usize, x: usize| self.table[(z * pd[1] + y) * pd[2] + x] as i64;
        let (z0, y0, x0) = (o[0], o[1], o[2]);
        let (z1, y1, x1) = (o[0] + e, o[1] + e, o[2] + e);
        let s = t(z1, y1, x1) - t(z0, y1, x1) - t(z1, y0, x1) - t(z1, y1, x0)
            + t(z0, y0, x1)
            + t(z0, y1, x0)
            + t(z1, y0, x0)
            - t(z0, y0, x0);
        s as u32
    }
}

/// All origins whose `edge³` cube has mask coverage of at least `min_fraction`.
pub fn valid_origins(mask: &Mask, edge: usize, min_fraction: f64) -> Result<Vec<Origin>> {
    let d = mask.dims();
    if edge == 0 || d.iter().any(|&n| n < edge) {
        return Err(Error::Sampling(format!("volume {d:?} smaller than patch edge {edge}")));
    }
    let integral = IntegralMask::new(mask);
    let needed = min_fraction * (edge * edge * edge) as f64;
    let mut out = Vec::new();
    for z in 0..=d[0] - edge {
        for y in 0..=d[1] - edge {
            for x in 0..=d[2] - edge {
                if integral.cube_sum([z, y, x], edge) as f64 >= needed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of the `edge³` cube at `origin` covered by `mask`.
pub fn mask_coverage(mask: &Mask, origin: Origin, edge: usize) -> f64 {
    let mut n = 0usize;
    for z in origin[0]..origin[0] + edge {
        for y in origin[1]..origin[1] + edge {
            for x in origin[2]..origin[2] + edge {
                n += mask.get(z, y, x) as usize;
            }
        }
    }
    n as f64 / (edge * edge * edge) as f64
}

/// Draws `n` patches with origins uniform over the positions whose mask
/// coverage is at least `min_mask_fraction`.
///
/// The admissible set is enumerated up front with a summed-area table, so a
/// draw is a single uniform index regardless of how sparse the mask is.
pub fn sample_training_patches<R: Rng + ?Sized>(
    v: &Volume,
    mask: &Mask,
    n: usize,
    edge: usize,
    min_mask_fraction: f64,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    mask.ensure_matches(v.dims())?;
    if n == 0 {
        return Ok(Vec::new());
    }
    if mask.is_empty() {
        return Err(Error::Sampling("mask is empty".into()));
    }
    let origins = valid_origins(mask, edge, min_mask_fraction)?;
    if origins.is_empty() {
        return Err(Error::Sampling(format!(
            "no patch position reaches min_mask_fraction {min_mask_fraction}"
        )));
    }
    Ok((0..n)
        .map(|_| {
            let origin = origins[rng.random_range(0..origins.len())];
            Patch {
                origin,
                edge,
                data: v.extract_cube(origin, edge),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::ValueSpace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(edge: usize, overlap: usize) -> GridSpec {
        GridSpec::new(edge, overlap).unwrap()
    }

    #[test]
    fn axis_positions_worked_examples() {
        assert_eq!(axis_positions(48, &g(48, 10)).unwrap(), vec![0]);
        assert_eq!(axis_positions(86, &g(48, 10)).unwrap(), vec![0, 38]);
        assert_eq!(axis_positions(100, &g(48, 10)).unwrap(), vec![0, 38, 52]);
    }

    #[test]
    fn short_axis_is_grid_error() {
        assert!(matches!(axis_positions(47, &g(48, 10)), Err(Error::Grid(_))));
        assert!(GridSpec::new(8, 8).is_err());
    }

    #[test]
    fn grid_is_lexicographic() {
        let o = inference_grid([16, 20, 16], &g(16, 4)).unwrap();
        assert_eq!(o, vec![[0, 0, 0], [0, 4, 0]]);
    }

    #[test]
    fn integral_matches_direct_count() {
        let mut m = Mask::empty([7, 6, 5]);
        for (i, b) in m.bits_mut().iter_mut().enumerate() {
            *b = (i * 7919) % 3 == 0;
        }
        let integral = IntegralMask::new(&m);
        for o in [[0, 0, 0], [1, 2, 1], [4, 3, 2]] {
            let direct = (mask_coverage(&m, o, 3) * 27.0).round() as u32;
            assert_eq!(integral.cube_sum(o, 3), direct);
        }
    }

    #[test]
    fn exact_size_volume_has_single_origin() {
        let v = Volume::filled([8, 8, 8], [2.0; 3], 0.0, ValueSpace::Normalized).unwrap();
        let m = Mask::full([8, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_training_patches(&v, &m, 5, 8, 0.5, &mut rng).unwrap();
        assert!(p.iter().all(|p| p.origin == [0, 0, 0] && p.data.len() == 512));
        assert!(sample_training_patches(&v, &m, 0, 8, 0.5, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn unreachable_fraction_names_the_threshold() {
        let v = Volume::filled([8, 8, 8], [2.0; 3], 0.0, ValueSpace::Normalized).unwrap();
        let mut m = Mask::empty([8, 8, 8]);
        m.set(0, 0, 0, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_training_patches(&v, &m, 1, 4, 0.5, &mut rng).unwrap_err();
        assert!(err.to_string().contains("0.5"), "{err}");
        let empty = Mask::empty([8, 8, 8]);
        assert!(sample_training_patches(&v, &empty, 1, 4, 0.5, &mut rng).is_err());
    }

    #[test]
    fn sampled_patches_respect_coverage() {
        let v = Volume::filled([12, 12, 12], [2.0; 3], 0.0, ValueSpace::Normalized).unwrap();
        let mut m = Mask::empty([12, 12, 12]);
        for z in 0..6 {
            for y in 0..12 {
                for x in 0..12 {
                    m.set(z, y, x, true);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in sample_training_patches(&v, &m, 200, 4, 0.75, &mut rng).unwrap() {
            assert!(mask_coverage(&m, p.origin, 4) >= 0.75);
        }
    }
}
