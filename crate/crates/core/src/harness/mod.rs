//! The online adaptation loop, metrics and run reports.

mod adapt;
mod metrics;
mod run;

pub use adapt::{
    check_checkpoint, supervised_mask, AdaptationConfig, AdaptationState, BufferedFrame,
    FrameOutcome, PseudoLabels, Toggles, ADAPT_LR,
};
pub use metrics::{evaluate_iou, label_accuracy, ConfusionMatrix, IouResult};
pub use run::{
    ablation_ladder, run_ablation, run_source_only, run_tta, run_tta_dir, run_tta_sequences,
    run_tta_sequences_with_model, FrameRecord, RunOptions, RunReport,
};
