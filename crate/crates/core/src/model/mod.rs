//! Segmentation network, losses, optimizer and persistence.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod objective;
pub mod pretrain;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use loss::{adaptive_beta, smoothed_target, soft_dice_loss, DiceLoss, DEFAULT_BETA_HAT};
pub use network::{
    softmax_rows, Dense, Forward, Gradients, HeadForward, Layer, LayerSet, NetworkParams,
    EMBED_DIM, HIDDEN_DIM, PRED_HIDDEN_DIM, PROJ_DIM,
};
pub use objective::{evaluate_objective, total_loss_and_grad, LossBreakdown, ObjectiveInputs};
pub use pretrain::{
    feature_statistics, pretrain_on_features, pretrain_source, PretrainConfig, PretrainReport,
};
