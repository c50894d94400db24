//! 3D patch-based normalizing flow for unsupervised anomaly detection in
//! volumetric scans.
//!
//! Volumes are resampled and normalised ([`preprocess`]), cut into cubic
//! patches ([`patching`]), and scored by a multi-scale flow ([`flow`]) trained
//! on normal data only ([`train`]). The [`pipeline`] turns patch scores into a
//! smoothed log-likelihood map, flags low-likelihood regions and classifies
//! each patient by flagged volume; [`metrics`] evaluates the decisions.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod components;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod metrics;
pub mod patching;
pub mod pipeline;
pub mod preprocess;
pub mod real;
pub mod rvol;
pub mod smoothing;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use experiment::{run_e2e, E2eConfig, E2eReport, E2eSummary};
pub use flow::{FlowConfig, FlowModel, LatentBundle, LogDensity, Tensor};
pub use metrics::{Label, LabeledScore, Metrics, ThresholdSweep};
pub use patching::{GridSpec, Origin, Patch};
pub use pipeline::{Calibration, LogPMap, PatchScore, PatientResult, PipelineConfig, ScoreMode};
pub use preprocess::{MaskStatus, PreprocessConfig};
pub use real::Real;
pub use synth::{SynthCase, SynthSpec};
pub use train::{TrainConfig, TrainReport, TrainState};
pub use volume::{Dims, Mask, Spacing, ValueSpace, Volume};
