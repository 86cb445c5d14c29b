//! Hypothesis-driven pose refinement: pose auto-encoder, one-plane
//! hypotheses, cost-based scoring and fusion, and staged training.

mod model;
mod params;
mod train;

pub use model::{
    aim_loss, min_cost_row, pose_loss, refinement_loss, scoring_loss, ForwardOptions, Fusion, HypothesisSet, LossParts,
    PoseEmbedding, MIN_QUATERNION_NORM, SCORE_LOSS_WEIGHT,
};
pub use params::{Architecture, NopeSacParams, ParamGroup};
pub use train::{
    aim_reconstruction_errors, aim_reconstruction_medians, lower_median, predicted_correspondences, predicted_matches, LogRow, Stage,
    StageConfig, TrainConfig, Trainer, LOG_HEADER,
};
