//! Whole-volume inference: grid scoring, Log P map aggregation, binarisation,
//! component filtering and patient-level classification.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::label_components;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Tensor};
use crate::metrics::Label;
use crate::patching::{inference_grid, GridSpec, Origin};
use crate::real::Real;
use crate::smoothing::smooth_volume;
use crate::volume::{voxel_volume_mm3, Dims, Mask, Spacing, ValueSpace, Volume};

pub const MIN_CALIBRATION_SCORES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub origin: Origin,
    pub per_dim_nats: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    Serial,
    Parallel,
}

/// Scores every grid patch of `v` in lexicographic origin order.
pub fn score_volume<T: Real>(
    v: &Volume,
    mask: &Mask,
    model: &FlowModel<T>,
    grid: &GridSpec,
    mode: ScoreMode,
) -> Result<Vec<PatchScore>> {
    mask.ensure_matches(v.dims())?;
    if model.config.patch_edge != grid.patch_edge {
        return Err(Error::Config(format!(
            "model patch edge {} differs from grid patch edge {}",
            model.config.patch_edge, grid.patch_edge
        )));
    }
    if model.config.in_channels != 1 {
        return Err(Error::Config("volume scoring needs a single-channel model".into()));
    }
    let origins = inference_grid(v.dims(), grid).map_err(|e| Error::Config(e.to_string()))?;
    let score = |&origin: &Origin| -> Result<PatchScore> {
        let cube = v.extract_cube(origin, grid.patch_edge);
        let x = Tensor::<f32>::from_patch(&cube, grid.patch_edge)?.cast::<T>();
        Ok(PatchScore {
            origin,
            per_dim_nats: model.log_prob(&x)?.per_dim_nats,
        })
    };
    match mode {
        ScoreMode::Serial => origins.iter().map(score).collect(),
        ScoreMode::Parallel => origins.par_iter().map(score).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogPMap {
    pub dims: Dims,
    pub spacing: Spacing,
    /// Per-voxel nats/dim, z-major.
    pub values: Vec<f64>,
    pub coverage: Vec<u32>,
}

impl LogPMap {
    pub fn to_volume(&self) -> Result<Volume> {
        Volume::new(
            self.dims,
            self.spacing,
            self.values.iter().map(|&v| v as f32).collect(),
            ValueSpace::LogPMap,
        )
    }
}

/// Mean score of the covering patches per voxel, then Gaussian smoothing.
///
/// Patches are visited in origin order and averaged incrementally, so the
/// result does not depend on the order of `scores` and a constant score field
/// maps to exactly that constant.
pub fn aggregate_map(
    scores: &[PatchScore],
    dims: Dims,
    spacing: Spacing,
    grid: &GridSpec,
    sigma: f64,
) -> Result<LogPMap> {
    if scores.is_empty() {
        return Err(Error::Argument("no patch scores to aggregate".into()));
    }
    let e = grid.patch_edge;
    let mut sorted = scores.to_vec();
    sorted.sort_by_key(|a| a.origin);
    let n = dims[0] * dims[1] * dims[2];
    let mut values = vec![0.0f64; n];
    let mut coverage = vec![0u32; n];
    for s in &sorted {
        let o = s.origin;
        if (0..3).any(|a| o[a] + e > dims[a]) {
            return Err(Error::Argument(format!("patch at {o:?} leaves the {dims:?} volume")));
        }
        for z in o[0]..o[0] + e {
            for y in o[1]..o[1] + e {
                let row = (z * dims[1] + y) * dims[2];
                for i in row + o[2]..row + o[2] + e {
                    coverage[i] += 1;
                    values[i] += (s.per_dim_nats - values[i]) / coverage[i] as f64;
                }
            }
        }
    }
    smooth_volume(&mut values, dims, sigma);
    Ok(LogPMap {
        dims,
        spacing,
        values,
        coverage,
    })
}

/// Sorted reference distribution of per-dimension patch scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sorted: Vec<f64>,
}

pub fn calibrate(scores: &[f64]) -> Result<Calibration> {
    if scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::Calibration(format!(
            "need at least {MIN_CALIBRATION_SCORES} scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("calibration scores must be finite".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Calibration { sorted })
}

impl Calibration {
    /// Linear-interpolation quantile over the sorted scores.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        quantile_sorted(&self.sorted, q)
    }
}

/// Quantile `x[⌊h⌋] + (h − ⌊h⌋)(x[⌊h⌋+1] − x[⌊h⌋])` with `h = (n − 1)q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Calibration("empty calibration distribution".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Argument(format!("quantile {q} outside [0, 1]")));
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    Ok(sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo]))
}

/// Flags lung voxels whose map value lies below the `q`-quantile of the
/// calibration scores.
pub fn binarize(map: &LogPMap, mask: &Mask, calibration: &Calibration, q: f64) -> Result<Mask> {
    mask.ensure_matches(map.dims)?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("binarize quantile must be in (0, 1), got {q}")));
    }
    let theta = calibration.quantile(q)?;
    let bits = map
        .values
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| m && v < theta)
        .collect();
    Mask::new(map.dims, bits)
}

/// Removes 26-connected components smaller than `min_cm3`.
pub fn filter_components(bin: &Mask, spacing: Spacing, min_cm3: f64) -> Mask {
    let voxel_cm3 = voxel_volume_mm3(spacing) / 1000.0;
    label_components(bin).select(|c| c.voxels as f64 * voxel_cm3 >= min_cm3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub anomaly_volume_cm3: f64,
    pub label: Label,
    #[serde(rename = "threshold_T")]
    pub threshold_t: f64,
    pub n_patches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_map_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_patch_scores: Option<Vec<PatchScore>>,
}

pub fn check_threshold(t_cm3: f64) -> Result<()> {
    if !(0.5..=20.0).contains(&t_cm3) {
        return Err(Error::Config(format!(
            "decision threshold {t_cm3} cm³ outside [0.5, 20]"
        )));
    }
    Ok(())
}

pub fn anomaly_volume_cm3(bin: &Mask, spacing: Spacing) -> f64 {
    bin.count() as f64 * voxel_volume_mm3(spacing) / 1000.0
}

/// Abnormal exactly when the flagged volume exceeds `t_cm3`.
pub fn classify(bin: &Mask, spacing: Spacing, t_cm3: f64) -> Result<PatientResult> {
    check_threshold(t_cm3)?;
    let v = anomaly_volume_cm3(bin, spacing);
    Ok(PatientResult {
        anomaly_volume_cm3: v,
        label: if v > t_cm3 { Label::Abnormal } else { Label::Normal },
        threshold_t: t_cm3,
        n_patches: 0,
        logp_map_path: None,
        per_patch_scores: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub smoothing_sigma_vox: f64,
    pub binarize_quantile: f64,
    pub min_component_cm3: f64,
    pub decision_threshold_cm3: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: GridSpec::default(),
            smoothing_sigma_vox: 2.0,
            binarize_quantile: 0.02,
            min_component_cm3: 0.1,
            decision_threshold_cm3: 5.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.smoothing_sigma_vox >= 0.0) {
            return Err(Error::Config("smoothing sigma must be non-negative".into()));
        }
        if !(self.binarize_quantile > 0.0 && self.binarize_quantile < 1.0) {
            return Err(Error::Config("binarize quantile must be in (0, 1)".into()));
        }
        if !(self.min_component_cm3 >= 0.0) {
            return Err(Error::Config("min component volume must be non-negative".into()));
        }
        check_threshold(self.decision_threshold_cm3)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Config(format!("line {}: bad value for {key}", n + 1));
            match key {
                "patch_edge" => cfg.grid.patch_edge = value.parse().map_err(|_| bad())?,
                "overlap" => cfg.grid.overlap = value.parse().map_err(|_| bad())?,
                "smoothing_sigma_vox" => cfg.smoothing_sigma_vox = value.parse().map_err(|_| bad())?,
                "binarize_quantile" => cfg.binarize_quantile = value.parse().map_err(|_| bad())?,
                "min_component_cm3" => cfg.min_component_cm3 = value.parse().map_err(|_| bad())?,
                "decision_threshold_cm3" => cfg.decision_threshold_cm3 = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key}", n + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything the pipeline derives from one volume.
#[derive(Clone, Debug)]
pub struct VolumeAnalysis {
    pub scores: Vec<PatchScore>,
    pub map: LogPMap,
    pub anomalies: Mask,
    pub result: PatientResult,
}

/// Score, aggregate, binarise, filter and classify one normalised volume.
pub fn analyze_volume<T: Real>(
    v: &Volume,
    lung: &Mask,
    model: &FlowModel<T>,
    cfg: &PipelineConfig,
    calibration: &Calibration,
    mode: ScoreMode,
) -> Result<VolumeAnalysis> {
    cfg.validate()?;
    let scores = score_volume(v, lung, model, &cfg.grid, mode)?;
    let map = aggregate_map(&scores, v.dims(), v.spacing(), &cfg.grid, cfg.smoothing_sigma_vox)?;
    let bin = binarize(&map, lung, calibration, cfg.binarize_quantile)?;
    let anomalies = filter_components(&bin, v.spacing(), cfg.min_component_cm3);
    let mut result = classify(&anomalies, v.spacing(), cfg.decision_threshold_cm3)?;
    result.n_patches = scores.len();
    Ok(VolumeAnalysis {
        scores,
        map,
        anomalies,
        result,
    })
}
