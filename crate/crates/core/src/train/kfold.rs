use serde::{Deserialize, Serialize};

use super::metrics::{aggregate_clips, report_from_clips, ClipPrediction, MetricsReport, SubjectPrediction};
use super::trainer::{train_fold, StepLog, TrainConfig};
use crate::data::{plan_folds, Cohort, FoldPlan};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::scalar::Scalar;

/// Per-fold and pooled results of a cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub n_folds: usize,
    pub l_fold: usize,
    pub folds: Vec<MetricsReport>,
    pub pooled: MetricsReport,
    pub subjects: Vec<SubjectPrediction>,
    pub final_loss: Vec<Option<f64>>,
}

/// Plans subject-disjoint folds with the training seed, trains one model per
/// fold and pools every held-out prediction.
pub fn run_kfold<S: Scalar>(
    cohort: &Cohort,
    model_config: &ModelConfig,
    config: &TrainConfig,
    l_fold: usize,
) -> Result<KFoldReport> {
    let plan = plan_folds(cohort.subjects.len(), l_fold, config.seed)?;
    run_kfold_with_plan::<S>(cohort, &plan, model_config, config)
}

pub fn run_kfold_with_plan<S: Scalar>(
    cohort: &Cohort,
    plan: &FoldPlan,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<KFoldReport> {
    let mut folds = Vec::with_capacity(plan.k);
    let mut pooled: Vec<ClipPrediction> = Vec::new();
    let mut final_loss = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let outcome = train_fold::<S>(cohort, plan, fold, model_config, config)?;
        folds.push(outcome.report);
        final_loss.push(outcome.history.last().map(|s: &StepLog| s.loss));
        pooled.extend(outcome.predictions);
    }
    Ok(KFoldReport {
        n_folds: plan.k,
        l_fold: plan.l_fold,
        folds,
        pooled: report_from_clips(None, &pooled)?,
        subjects: aggregate_clips(&pooled)?,
        final_loss,
    })
}
