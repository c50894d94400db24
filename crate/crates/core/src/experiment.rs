//! Seeded synthetic end-to-end experiment: generate, preprocess, train,
//! calibrate, score, pick the decision threshold and evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{encode_checkpoint, load_checkpoint, FlowConfig, FlowModel};
use crate::metrics::{evaluate, scores_csv, select_threshold, Label, LabeledScore, Metrics, ThresholdSweep};
use crate::patching::{mask_coverage, GridSpec};
use crate::pipeline::{
    analyze_volume, calibrate, score_volume, Calibration, PatchScore, PatientResult, PipelineConfig, ScoreMode,
};
use crate::preprocess::{clip_normalize, fallback_lung_mask, resample, MaskStatus, PreprocessConfig};
use crate::real::Real;
use crate::synth::{generate_synthetic, SynthSpec};
use crate::train::{log_csv, train, TrainConfig, VolumePatchSource};
use crate::volume::{Dims, Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2eConfig {
    pub seed: u64,
    pub dims: Dims,
    pub spacing_mm: f32,
    pub n_train: usize,
    pub n_val_normal: usize,
    pub n_val_lesioned: usize,
    pub n_test_normal: usize,
    pub n_test_lesioned: usize,
    pub lesions_per_case: usize,
    pub lesion_radius_mm: (f64, f64),
    pub lesion_shift_hu: f64,
    pub texture_smoothness: f64,
    pub min_mask_fraction: f64,
    pub preprocess: PreprocessConfig,
    pub model: FlowConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub sweep: ThresholdSweep,
}

impl Default for E2eConfig {
    fn default() -> Self {
        let model = FlowConfig::desk();
        E2eConfig {
            seed: 2024,
            dims: [64, 64, 64],
            spacing_mm: 2.0,
            n_train: 40,
            n_val_normal: 10,
            n_val_lesioned: 10,
            n_test_normal: 10,
            n_test_lesioned: 10,
            lesions_per_case: 2,
            lesion_radius_mm: (8.0, 12.0),
            lesion_shift_hu: 300.0,
            texture_smoothness: 1.5,
            min_mask_fraction: 0.5,
            preprocess: PreprocessConfig::default(),
            model,
            train: TrainConfig::default(),
            pipeline: PipelineConfig {
                grid: GridSpec {
                    patch_edge: model.patch_edge,
                    overlap: 10,
                },
                ..PipelineConfig::default()
            },
            sweep: ThresholdSweep::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One preprocessed synthetic subject.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub volume: Volume,
    pub lung: Mask,
    /// Ground-truth lesion voxels (empty for normal subjects).
    pub lesions: Mask,
}

fn synth_subject(cfg: &E2eConfig, id: String, split: Split, lesioned: bool, rng: &mut ChaCha8Rng) -> Result<Subject> {
    let spec = SynthSpec {
        dims: cfg.dims,
        spacing: [cfg.spacing_mm; 3],
        seed: rng.random(),
        texture_smoothness: cfg.texture_smoothness,
        lesion_count: if lesioned { cfg.lesions_per_case } else { 0 },
        lesion_radius_mm: rng.random_range(cfg.lesion_radius_mm.0..=cfg.lesion_radius_mm.1),
        lesion_intensity_shift: cfg.lesion_shift_hu,
    };
    let case = generate_synthetic(&spec)?;
    let hu = resample(&case.volume, cfg.preprocess.target_spacing_mm)?;
    if hu.dims() != case.volume.dims() {
        return Err(Error::Config(
            "synthetic spacing must equal the preprocessing target spacing".into(),
        ));
    }
    let (lung, status) = fallback_lung_mask(&hu);
    if status == MaskStatus::Empty {
        log::warn!("{id}: fallback lung mask is empty");
    }
    Ok(Subject {
        id,
        split,
        label: if lesioned { Label::Abnormal } else { Label::Normal },
        volume: clip_normalize(&hu, &cfg.preprocess)?,
        lung,
        lesions: case.lesions,
    })
}

/// Generates every subject in a fixed order from the master seed.
pub fn synth_cohort(cfg: &E2eConfig) -> Result<Vec<Subject>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let plan = [
        (Split::Train, "train", cfg.n_train, 0),
        (Split::Validation, "val", cfg.n_val_normal, cfg.n_val_lesioned),
        (Split::Test, "test", cfg.n_test_normal, cfg.n_test_lesioned),
    ];
    for (split, tag, normal, lesioned) in plan {
        for i in 0..normal + lesioned {
            let is_lesioned = i >= normal;
            let id = format!("{tag}-{i:03}");
            out.push(synth_subject(cfg, id, split, is_lesioned, &mut rng)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectOutcome {
    pub id: String,
    pub split: Split,
    pub truth: Label,
    pub result: PatientResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2eSummary {
    pub seed: u64,
    pub precision: String,
    pub initial_bits_per_dim: f64,
    pub final_bits_per_dim: f64,
    /// `(initial − final) / |initial|`.
    pub bits_per_dim_decrease: f64,
    pub calibration_patches: usize,
    pub binarize_threshold_nats: f64,
    pub chosen_t_cm3: f64,
    pub validation_youden_j: f64,
    pub test_auroc: f64,
    pub test_f1: f64,
    pub test_accuracy: f64,
    pub lesion_patch_mean_nats: f64,
    pub normal_patch_mean_nats: f64,
    pub lesion_patches: usize,
    pub normal_patches: usize,
    pub checkpoint_fnv1a: String,
    pub train_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct E2eReport {
    pub summary: E2eSummary,
    pub metrics: Metrics,
    pub subjects: Vec<SubjectOutcome>,
    pub checkpoint: Vec<u8>,
    pub dir: PathBuf,
}

impl E2eReport {
    /// Patient results as JSON, the artefact compared across repeated runs.
    pub fn patients_json(&self) -> String {
        serde_json::to_string_pretty(&self.subjects).expect("serialisable")
    }
}

/// FNV-1a 64-bit digest, used only to fingerprint checkpoints in reports.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { f64::NAN } else { s / n as f64 }, n)
}

fn patch_has_lesion(lesions: &Mask, origin: [usize; 3], edge: usize) -> bool {
    mask_coverage(lesions, origin, edge) > 0.0
}

/// Runs the whole experiment, writing artefacts into `dir`. `T` is the
/// precision used for training and scoring; checkpoints are always f32.
pub fn run_e2e<T: Real>(cfg: &E2eConfig, dir: &Path) -> Result<E2eReport> {
    let start = Instant::now();
    if cfg.pipeline.grid.patch_edge != cfg.model.patch_edge {
        return Err(Error::Config(
            "pipeline grid edge must equal the model patch edge".into(),
        ));
    }
    cfg.pipeline.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(
        dir,
        "config.json",
        serde_json::to_string_pretty(cfg).expect("serialisable"),
    )?;

    let subjects = synth_cohort(cfg)?;
    log::info!("generated {} subjects", subjects.len());

    let mut source = VolumePatchSource {
        cases: subjects
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| (s.volume.clone(), s.lung.clone()))
            .collect(),
        edge: cfg.model.patch_edge,
        min_mask_fraction: cfg.min_mask_fraction,
    };
    let ckpt_path = dir.join("model.rflw");
    let train_start = Instant::now();
    let report = train::<T>(cfg.model, &cfg.train, &mut source, Some(&ckpt_path))?;
    let train_seconds = train_start.elapsed().as_secs_f64();
    write(dir, "train_log.csv", log_csv(&report.log))?;
    let checkpoint = encode_checkpoint(&report.state.model);

    // Score with exactly what was written to disk.
    let model: FlowModel<T> = load_checkpoint(&ckpt_path)?;

    let edge = cfg.model.patch_edge;
    let mut calibration_scores = Vec::new();
    let mut val_patch_scores = Vec::new();
    for s in subjects.iter().filter(|s| s.split == Split::Validation) {
        let scores = score_volume(&s.volume, &s.lung, &model, &cfg.pipeline.grid, ScoreMode::Parallel)?;
        if s.label == Label::Normal {
            calibration_scores.extend(
                scores
                    .iter()
                    .filter(|p| mask_coverage(&s.lung, p.origin, edge) >= cfg.min_mask_fraction)
                    .map(|p| p.per_dim_nats),
            );
        }
        val_patch_scores.push(scores);
    }
    let calibration: Calibration = calibrate(&calibration_scores)?;
    write(
        dir,
        "calibration.json",
        serde_json::to_string(&calibration).expect("serialisable"),
    )?;

    let mut outcomes = Vec::new();
    let mut lesion_scores = Vec::new();
    let mut normal_scores = Vec::new();
    for s in subjects.iter().filter(|s| s.split != Split::Train) {
        let a = analyze_volume(
            &s.volume,
            &s.lung,
            &model,
            &cfg.pipeline,
            &calibration,
            ScoreMode::Parallel,
        )?;
        if s.split == Split::Test {
            collect_patch_groups(
                s,
                &a.scores,
                edge,
                cfg.min_mask_fraction,
                &mut lesion_scores,
                &mut normal_scores,
            );
        }
        outcomes.push(SubjectOutcome {
            id: s.id.clone(),
            split: s.split,
            truth: s.label,
            result: a.result,
        });
    }

    let labeled = |split: Split| -> Vec<LabeledScore> {
        outcomes
            .iter()
            .filter(|o| o.split == split)
            .map(|o| LabeledScore::new(o.id.clone(), o.result.anomaly_volume_cm3, o.truth))
            .collect()
    };
    let val = labeled(Split::Validation);
    let test = labeled(Split::Test);
    let (chosen_t, best_j) = select_threshold(&val, &cfg.sweep)?;
    for o in &mut outcomes {
        o.result.threshold_t = chosen_t;
        o.result.label = if o.result.anomaly_volume_cm3 > chosen_t {
            Label::Abnormal
        } else {
            Label::Normal
        };
    }
    let metrics = evaluate(&test, chosen_t)?;
    write(dir, "val_scores.csv", scores_csv(&val))?;
    write(dir, "test_scores.csv", scores_csv(&test))?;
    write(dir, "roc.csv", metrics.roc_csv())?;
    write(
        dir,
        "metrics.json",
        serde_json::to_string_pretty(&metrics).expect("serialisable"),
    )?;

    let (lesion_mean, lesion_n) = mean(lesion_scores.into_iter());
    let (normal_mean, normal_n) = mean(normal_scores.into_iter());
    let summary = E2eSummary {
        seed: cfg.seed,
        precision: std::any::type_name::<T>().to_string(),
        initial_bits_per_dim: report.initial_bits_per_dim,
        final_bits_per_dim: report.final_bits_per_dim,
        bits_per_dim_decrease: (report.initial_bits_per_dim - report.final_bits_per_dim)
            / report.initial_bits_per_dim.abs(),
        calibration_patches: calibration.sorted.len(),
        binarize_threshold_nats: calibration.quantile(cfg.pipeline.binarize_quantile)?,
        chosen_t_cm3: chosen_t,
        validation_youden_j: best_j,
        test_auroc: metrics.auroc,
        test_f1: metrics.f1,
        test_accuracy: metrics.accuracy,
        lesion_patch_mean_nats: lesion_mean,
        normal_patch_mean_nats: normal_mean,
        lesion_patches: lesion_n,
        normal_patches: normal_n,
        checkpoint_fnv1a: format!("{:016x}", fnv1a(&checkpoint)),
        train_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    let report = E2eReport {
        summary,
        metrics,
        subjects: outcomes,
        checkpoint,
        dir: dir.to_path_buf(),
    };
    write(dir, "patients.json", report.patients_json())?;
    write(
        dir,
        "summary.json",
        serde_json::to_string_pretty(&report.summary).expect("serialisable"),
    )?;
    Ok(report)
}

/// Lesion patches touch at least one lesion voxel; normal patches come from
/// lesion-free subjects with enough lung coverage.
fn collect_patch_groups(
    s: &Subject,
    scores: &[PatchScore],
    edge: usize,
    min_mask_fraction: f64,
    lesion: &mut Vec<f64>,
    normal: &mut Vec<f64>,
) {
    for p in scores {
        if s.label == Label::Abnormal {
            if patch_has_lesion(&s.lesions, p.origin, edge) {
                lesion.push(p.per_dim_nats);
            }
        } else if mask_coverage(&s.lung, p.origin, edge) >= min_mask_fraction {
            normal.push(p.per_dim_nats);
        }
    }
}
