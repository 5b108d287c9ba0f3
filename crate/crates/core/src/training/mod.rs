//! Staged optimisation of the network.

pub mod config;
pub mod losses;
pub mod sampling;
pub mod sgd;
pub mod stage;

pub use config::{Sampling, TrainConfig, TrainingPlan};
pub use losses::{cross_entropy, regression_loss, smooth_l1, total_loss, weighted_loss};
pub use sampling::{sample_anchors, sample_rois, AnchorSample, RoiSample};
pub use sgd::{sgd_step, SgdSettings, Velocity};
pub use stage::{
    batch_losses, batch_objective, format_loss_csv, run_context_refit, run_stage, train_loop, BatchLosses, LossRecord, StageKind, TrainSample,
    TrainedModel,
};
