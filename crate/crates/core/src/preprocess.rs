//! Isotropic resampling, HU windowing and lung-mask acquisition.
//!
//! The fixed order is resample, then mask (computed on HU values), then
//! clip/normalise.

use serde::{Deserialize, Serialize};

use crate::components::{close_ball1, label_components};
use crate::error::{Error, Result};
use crate::volume::{voxel_count, Mask, ValueSpace, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_spacing_mm: f64,
    pub hu_min: f64,
    pub hu_max: f64,
    pub out_lo: f64,
    pub out_hi: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing_mm: 2.0,
            hu_min: -1020.0,
            hu_max: 200.0,
            out_lo: -0.5,
            out_hi: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_spacing_mm > 0.0) {
            return Err(Error::Argument(format!(
                "target spacing must be positive, got {}",
                self.target_spacing_mm
            )));
        }
        if !(self.hu_min < self.hu_max) {
            return Err(Error::Argument(format!(
                "hu_min {} >= hu_max {}",
                self.hu_min, self.hu_max
            )));
        }
        if !(self.out_lo < self.out_hi) {
            return Err(Error::Argument(format!(
                "out_lo {} >= out_hi {}",
                self.out_lo, self.out_hi
            )));
        }
        Ok(())
    }
}

/// Lerp that never leaves `[min(a, b), max(a, b)]`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return a;
    }
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Sample positions along one axis: for each output voxel, the lower input
/// index and the fractional weight toward the next one.
fn axis_samples(n_in: usize, sp_in: f64, n_out: usize, sp_out: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let pos = (i as f64 + 0.5) * sp_out / sp_in - 0.5;
            let pos = pos.clamp(0.0, (n_in - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Trilinear resampling to isotropic `target_spacing_mm`, sampled at
/// physical voxel centres and clamped to the input extent.
pub fn resample(v: &Volume, target_spacing_mm: f64) -> Result<Volume> {
    if !(target_spacing_mm > 0.0) || !target_spacing_mm.is_finite() {
        return Err(Error::Argument(format!(
            "target spacing must be positive, got {target_spacing_mm}"
        )));
    }
    let din = v.dims();
    let sp = v.spacing();
    let dout: [usize; 3] =
        std::array::from_fn(|a| ((din[a] as f64 * sp[a] as f64 / target_spacing_mm).round() as usize).max(1));
    let s: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| axis_samples(din[a], sp[a] as f64, dout[a], target_spacing_mm))
        .collect();

    let src = v.voxels();
    let at = |z: usize, y: usize, x: usize| src[(z * din[1] + y) * din[2] + x] as f64;
    let mut out = Vec::with_capacity(voxel_count(dout));
    for &(z0, z1, fz) in &s[0] {
        for &(y0, y1, fy) in &s[1] {
            for &(x0, x1, fx) in &s[2] {
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                out.push(lerp(c0, c1, fz) as f32);
            }
        }
    }
    let t = target_spacing_mm as f32;
    Volume::new(dout, [t, t, t], out, v.value_space())
}

/// Window to `[hu_min, hu_max]` and rescale linearly onto `[out_lo, out_hi]`.
pub fn clip_normalize(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let range = cfg.out_hi - cfg.out_lo;
    let width = cfg.hu_max - cfg.hu_min;
    let voxels = v
        .voxels()
        .iter()
        .map(|&x| {
            let c = (x as f64).clamp(cfg.hu_min, cfg.hu_max);
            let y = cfg.out_lo + (c - cfg.hu_min) * range / width;
            y.clamp(cfg.out_lo, cfg.out_hi) as f32
        })
        .collect();
    Volume::new(v.dims(), v.spacing(), voxels, ValueSpace::Normalized)
}

pub const LUNG_BAND_HU: (f32, f32) = (-950.0, -300.0);
pub const MIN_LUNG_COMPONENT_CM3: f64 = 1.0;
pub const MAX_LUNG_COMPONENTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStatus {
    Ok,
    /// Nothing survived the heuristic; callers should warn.
    Empty,
}

/// Threshold-and-components lung mask for when no external mask is supplied.
pub fn fallback_lung_mask(v: &Volume) -> (Mask, MaskStatus) {
    let dims = v.dims();
    let band: Vec<bool> = v
        .voxels()
        .iter()
        .map(|&h| h >= LUNG_BAND_HU.0 && h <= LUNG_BAND_HU.1)
        .collect();
    let band = Mask::new(dims, band).expect("same dims");
    let labels = label_components(&band);
    let voxel_cm3 = v.voxel_volume_mm3() / 1000.0;

    let mut candidates: Vec<_> = labels
        .components
        .iter()
        .filter(|c| !c.touches_all_faces(dims))
        .filter(|c| c.voxels as f64 * voxel_cm3 >= MIN_LUNG_COMPONENT_CM3)
        .collect();
    // Largest first; ties keep raster order.
    candidates.sort_by(|a, b| b.voxels.cmp(&a.voxels).then(a.label.cmp(&b.label)));
    let keep: Vec<u32> = candidates.iter().take(MAX_LUNG_COMPONENTS).map(|c| c.label).collect();
    let selected = labels.select(|c| keep.contains(&c.label));
    if selected.is_empty() {
        return (selected, MaskStatus::Empty);
    }
    (close_ball1(&selected), MaskStatus::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthSpec};

    #[test]
    fn window_endpoints_exact() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![-1020.0, 200.0, -410.0], ValueSpace::Hu).unwrap();
        let n = clip_normalize(&v, &PreprocessConfig::default()).unwrap();
        assert_eq!(n.voxels(), &[-0.5, 0.5, 0.0]);
        assert_eq!(n.value_space(), ValueSpace::Normalized);
    }

    #[test]
    fn out_of_window_values_clamped() {
        let v = Volume::new([1, 1, 2], [1.0; 3], vec![-3000.0, 3000.0], ValueSpace::Hu).unwrap();
        let n = clip_normalize(&v, &PreprocessConfig::default()).unwrap();
        assert_eq!(n.voxels(), &[-0.5, 0.5]);
    }

    #[test]
    fn identity_resample_is_bit_exact() {
        let v = Volume::from_fn([5, 6, 7], [2.0; 3], ValueSpace::Hu, |z, y, x| {
            ((z * 31 + y * 7 + x) as f32).sin() * 300.0
        })
        .unwrap();
        let r = resample(&v, 2.0).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn ramp_downsample_matches_hand_weights() {
        // Output centres at 1 mm and 3 mm sit at input indices 0.5 and 2.5,
        // halfway between neighbouring samples of the ramp x.
        let v = Volume::from_fn([4, 4, 4], [1.0; 3], ValueSpace::Hu, |_, _, x| x as f32).unwrap();
        let r = resample(&v, 2.0).unwrap();
        assert_eq!(r.dims(), [2, 2, 2]);
        assert_eq!(r.spacing(), [2.0; 3]);
        for z in 0..2 {
            for y in 0..2 {
                assert_eq!(r.get(z, y, 0), 0.5);
                assert_eq!(r.get(z, y, 1), 2.5);
            }
        }
    }

    #[test]
    fn resample_constant_and_rounding_of_dims() {
        let v = Volume::filled([5, 3, 9], [0.7, 1.3, 0.5], -123.0, ValueSpace::Hu).unwrap();
        let r = resample(&v, 2.0).unwrap();
        // round(1.75)=2, round(1.95)=2, round(2.25)=2
        assert_eq!(r.dims(), [2, 2, 2]);
        assert!(r.voxels().iter().all(|&x| x == -123.0));
        let tiny = resample(&Volume::filled([1, 1, 1], [0.1; 3], 1.0, ValueSpace::Hu).unwrap(), 2.0).unwrap();
        assert_eq!(tiny.dims(), [1, 1, 1]);
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.0, ValueSpace::Hu).unwrap();
        assert!(matches!(resample(&v, 0.0), Err(Error::Argument(_))));
        assert!(matches!(resample(&v, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn fallback_mask_empty_cases() {
        let air = Volume::filled([20, 20, 20], [2.0; 3], -1000.0, ValueSpace::Hu).unwrap();
        assert_eq!(fallback_lung_mask(&air).1, MaskStatus::Empty);
        let tissue = Volume::filled([20, 20, 20], [2.0; 3], 0.0, ValueSpace::Hu).unwrap();
        let (m, status) = fallback_lung_mask(&tissue);
        assert_eq!(status, MaskStatus::Empty);
        assert!(m.is_empty());
        let lungish = Volume::filled([20, 20, 20], [2.0; 3], -800.0, ValueSpace::Hu).unwrap();
        assert_eq!(fallback_lung_mask(&lungish).1, MaskStatus::Empty);
    }

    #[test]
    fn fallback_mask_recovers_synthetic_lung() {
        let case = generate_synthetic(&SynthSpec {
            lesion_count: 2,
            lesion_radius_mm: 8.0,
            ..SynthSpec::normal([48, 48, 48], [2.0; 3], 3)
        })
        .unwrap();
        let (m, status) = fallback_lung_mask(&case.volume);
        assert_eq!(status, MaskStatus::Ok);
        let dice = m.dice(&case.lung);
        assert!(dice >= 0.8, "dice {dice}");
    }
}
