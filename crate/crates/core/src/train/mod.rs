//! Run configuration, model assembly, the training loop and the ablation
//! grid.

mod ablate;
mod config;
mod model;
mod run;

pub use ablate::{ablate, AblationGrid, AblationRow, AblationTable};
pub use config::{RunConfig, Variant};
pub use model::{to_pixel_detections, ClipForward, Model, PixelDetection};
pub use run::{
    clip_ground_truth, eval_plan, learning_rate, predict, predict_video, prepare_sample, train, train_step, EpochStats,
    Progress, RunRecord, StepLoss, TrainOutcome, TrainSample, MIN_EXPORT_SCORE, TARGET_AP50,
};
