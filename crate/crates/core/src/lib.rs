//! Segmentation toolkit for tile-drainage-pipe detection: U-Net variants and
//! a hybrid CNN/transformer model, their training loop, and the two-level
//! evaluation protocol (threshold-swept Dice/IoU plus 3x3 patch grading).

pub mod augment;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod report;
pub mod schedule;
pub mod synth;
pub mod train;
pub mod transunet;
pub mod unet;

pub use augment::{augment, expand_training_set, AugmentOp};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{load_dataset, Sample};
pub use error::{Error, Result};
pub use losses::LossKind;
pub use metrics::{
    binarize, dice_coefficient, downscale_to_grid, grade_patches, iou, threshold_sweep,
    ConfusionMatrix4, Grade, GradeThresholds, PatchGrid, ThresholdSweepResult,
};
pub use model::{AnyModel, ModelSpec};
pub use nn::Mode;
pub use param::{count_parameters, HasParams, Param, ParamKind, ParameterStore, Real};
pub use schedule::ScheduleSpec;
pub use synth::{generate_synthetic_scene, LinePattern, SynthSceneConfig};
pub use train::{resume, train, EpochLog, OptimizerKind, TrainConfig, TrainOutcome};
pub use transunet::{TransUNet, TransUNetConfig};
pub use unet::{BasicUNet, ImprovedUNet, ImprovedUNetConfig};
