//! Deterministic synthetic chest-like volumes with optional spherical lesions.
//!
//! Outside an ellipsoidal lung region the volume is air (about -1000 HU with
//! faint white noise). Inside, a Gaussian-smoothed seeded noise field is mapped
//! into a band of ±100 HU around -800 HU. Lesions are balls of fixed physical
//! radius placed fully inside the lung whose voxels are shifted by a constant
//! HU offset. Values are rounded to whole HU, like a real scanner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothing::smooth_volume;
use crate::volume::{linear_index, voxel_count, Dims, Mask, Spacing, ValueSpace, Volume};

pub const AIR_HU: f64 = -1000.0;
pub const AIR_NOISE_HU: f64 = 5.0;
pub const LUNG_CENTER_HU: f64 = -800.0;
pub const LUNG_SWING_HU: f64 = 100.0;
/// Lung semi-axes as a fraction of the volume extent along each axis.
pub const LUNG_SEMI_AXIS_FRACTION: f64 = 0.4;
pub const MAX_PLACEMENT_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub seed: u64,
    /// Gaussian σ of the lung texture, in voxels.
    pub texture_smoothness: f64,
    pub lesion_count: usize,
    pub lesion_radius_mm: f64,
    pub lesion_intensity_shift: f64,
}

impl SynthSpec {
    pub fn normal(dims: Dims, spacing: Spacing, seed: u64) -> Self {
        SynthSpec {
            dims,
            spacing,
            seed,
            texture_smoothness: 1.5,
            lesion_count: 0,
            lesion_radius_mm: 10.0,
            lesion_intensity_shift: 300.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub volume: Volume,
    pub lung: Mask,
    pub lesions: Mask,
    /// Voxel centres of the placed lesions.
    pub lesion_centres: Vec<[usize; 3]>,
}

fn lung_mask(dims: Dims, spacing: Spacing) -> Mask {
    let mut m = Mask::empty(dims);
    let centre: Vec<f64> = (0..3).map(|a| dims[a] as f64 * spacing[a] as f64 / 2.0).collect();
    let semi: Vec<f64> = (0..3)
        .map(|a| LUNG_SEMI_AXIS_FRACTION * dims[a] as f64 * spacing[a] as f64)
        .collect();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z, y, x];
                let r2: f64 = (0..3)
                    .map(|a| {
                        let pos = (p[a] as f64 + 0.5) * spacing[a] as f64;
                        ((pos - centre[a]) / semi[a]).powi(2)
                    })
                    .sum();
                if r2 <= 1.0 {
                    m.set(z, y, x, true);
                }
            }
        }
    }
    m
}

/// Voxel offsets of a ball of physical radius `radius_mm` around a voxel centre.
pub fn ball_offsets(radius_mm: f64, spacing: Spacing) -> Vec<[isize; 3]> {
    let reach: Vec<isize> = spacing
        .iter()
        .map(|&s| (radius_mm / s as f64).floor() as isize)
        .collect();
    let mut out = Vec::new();
    for dz in -reach[0]..=reach[0] {
        for dy in -reach[1]..=reach[1] {
            for dx in -reach[2]..=reach[2] {
                let d2 = (dz as f64 * spacing[0] as f64).powi(2)
                    + (dy as f64 * spacing[1] as f64).powi(2)
                    + (dx as f64 * spacing[2] as f64).powi(2);
                if d2 <= radius_mm * radius_mm {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

fn offset_index(dims: Dims, p: [usize; 3], off: [isize; 3]) -> Option<usize> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + off[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(linear_index(dims, q[0], q[1], q[2]))
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCase> {
    let dims = spec.dims;
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::Argument(format!(
            "synthetic dims must be >= 16 per axis, got {dims:?}"
        )));
    }
    if spec.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Argument(format!(
            "spacing must be positive, got {:?}",
            spec.spacing
        )));
    }
    if !(spec.texture_smoothness > 0.0) {
        return Err(Error::Argument("texture_smoothness must be positive".into()));
    }
    if spec.lesion_count > 0 && !(spec.lesion_radius_mm > 0.0) {
        return Err(Error::Argument("lesion_radius_mm must be positive".into()));
    }

    let n = voxel_count(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut texture: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    smooth_volume(&mut texture, dims, spec.texture_smoothness);
    let mean = texture.iter().sum::<f64>() / n as f64;
    let std = (texture.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let air_noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();

    let lung = lung_mask(dims, spec.spacing);
    let mut hu: Vec<f64> = (0..n)
        .map(|i| {
            if lung.bits()[i] {
                let t = (texture[i] - mean) / std;
                LUNG_CENTER_HU + LUNG_SWING_HU * (0.5 * t).tanh()
            } else {
                AIR_HU + AIR_NOISE_HU * air_noise[i]
            }
        })
        .collect();

    let mut lesions = Mask::empty(dims);
    let mut lesion_centres = Vec::new();
    if spec.lesion_count > 0 {
        let ball = ball_offsets(spec.lesion_radius_mm, spec.spacing);
        // One-voxel margin keeps distinct lesions from touching.
        let halo = ball_offsets(
            spec.lesion_radius_mm + spec.spacing.iter().cloned().fold(0.0f32, f32::max) as f64 * 1.75,
            spec.spacing,
        );
        let lung_voxels: Vec<usize> = (0..n).filter(|&i| lung.bits()[i]).collect();
        if lung_voxels.is_empty() {
            return Err(Error::Placement("lung region is empty".into()));
        }
        for k in 0..spec.lesion_count {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_RETRIES {
                let flat = lung_voxels[rng.random_range(0..lung_voxels.len())];
                let p = [flat / (dims[1] * dims[2]), (flat / dims[2]) % dims[1], flat % dims[2]];
                let inside = ball
                    .iter()
                    .all(|&off| matches!(offset_index(dims, p, off), Some(i) if lung.bits()[i]));
                let clear = halo
                    .iter()
                    .all(|&off| offset_index(dims, p, off).is_none_or(|i| !lesions.bits()[i]));
                if inside && clear {
                    for &off in &ball {
                        let i = offset_index(dims, p, off).expect("ball checked inside");
                        lesions.bits_mut()[i] = true;
                    }
                    lesion_centres.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Placement(format!(
                    "lesion {k} of radius {} mm did not fit after {MAX_PLACEMENT_RETRIES} attempts",
                    spec.lesion_radius_mm
                )));
            }
        }
        for i in 0..n {
            if lesions.bits()[i] {
                hu[i] += spec.lesion_intensity_shift;
            }
        }
    }

    let voxels = hu.iter().map(|&v| v.round() as f32).collect();
    let volume = Volume::new(dims, spec.spacing, voxels, ValueSpace::Hu)?;
    Ok(SynthCase {
        volume,
        lung,
        lesions,
        lesion_centres,
    })
}
