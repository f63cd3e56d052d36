//! Core/penumbra segmentation of ischemic stroke from colour-coded CT
//! perfusion maps.
//!
//! The crate covers the whole workflow: a manifest-driven dataset layer, a
//! deterministic phantom generator, the focal Tversky objective, slow- and
//! early-fusion encoder-decoder networks, a training loop with staged
//! unfreezing, brain-mask post-processing, evaluation metrics and the sweep
//! drivers that tie them together.

pub mod dataset;
pub mod distance;
pub mod experiments;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod overlay;
pub mod synthgen;
pub mod train;

pub use dataset::{
    load_manifest, load_patient, save_manifest, split_dataset, DatasetManifest, LabelVolume, MipVolume,
    ParametricMapStack, PatientStudy, SeverityGroup, Spacing, SplitAssignment, TissueClass,
};
pub use loss::{focal_tversky_loss, tversky_index, LossSpec};
pub use model::{build_model, Fusion, FreezeMode, FreezeStage, InputSet, ModelConfig, ModelGraph};
pub use train::{train, TrainConfig, TrainHistory};
