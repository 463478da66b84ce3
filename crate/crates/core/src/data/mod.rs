//! Synthetic cohorts, preprocessing geometry, augmentation and fold planning.

pub mod augment;
pub mod bbox;
pub mod clipfile;
pub mod cohort;
pub mod folds;
pub mod preprocess;

pub use augment::{apply_augment, augment_clip, AugmentParams};
pub use bbox::{filter_frame, iou, BoundingBox, FrameDecision};
pub use cohort::{
    generate_synthetic_cohort, load_cohort, load_manifest, write_cohort, Clip, Cohort, CohortSpec,
    Label, SubjectInfo,
};
pub use folds::{fold_count, plan_folds, FoldPlan};
pub use preprocess::{segment_count, segment_video, trim_video};
