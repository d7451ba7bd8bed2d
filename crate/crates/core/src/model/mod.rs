//! The segmentation model and its training loop.

pub mod bank;
pub mod check;
pub mod correlation;
pub mod hca;
pub mod network;
pub mod prototypes;
pub mod synth;
pub mod train;

pub use bank::{base_guidance, BasePrototypeBank};
pub use correlation::{calibrate_background, compute_cmc, CorrelationTensor};
pub use hca::{hca_layer, HcaLayer};
pub use network::{
    backbone_stub, base_targets, loss, predict, CosegParams, ForwardOutput, ModelConfig,
};
pub use prototypes::{extract_prototypes, PrototypeSet};
pub use synth::{synth_pool, synth_scene, SceneLayout};
pub use train::{evaluate, train_toy, TrainConfig, TrainOutcome, Trainer};
