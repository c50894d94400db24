//! The invertible model and its building blocks.

pub mod actnorm;
pub mod checkpoint;
pub mod conv;
pub mod coupling;
pub mod invconv;
pub mod model;
pub mod reshape;
pub mod tensor;

pub use actnorm::ActNorm;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use conv::Conv3d;
pub use coupling::Coupling;
pub use invconv::InvConv;
pub use model::{FlowConfig, FlowModel, FlowParams, FlowStep, LatentBundle, LogDensity};
pub use reshape::{split, squeeze, unsqueeze};
pub use tensor::Tensor;
