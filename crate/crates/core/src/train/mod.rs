//! Optimizer, learning-rate schedule, training loop, cross-validation,
//! metrics and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod kfold;
pub mod metrics;
pub mod schedule;
pub mod trainer;
pub mod verify;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use kfold::{run_kfold, run_kfold_with_plan, KFoldReport};
pub use metrics::{
    aggregate_clips, aggregate_subject, compute_metrics, percent, report_from_clips, roc_auc, ClipPrediction,
    Confusion, MetricsReport, SubjectPrediction,
};
pub use schedule::cyclic_lr;
pub use trainer::{
    batch_gradients, clip_accuracy, evaluate, split_fold, train_and_evaluate, train_fold, BatchGradients,
    FoldOutcome, StepLog, TrainConfig, Trainer,
};
pub use verify::{model_gradcheck, ModelGradcheck};
