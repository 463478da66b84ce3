//! Mini-batch training with per-sample graphs. Each clip gets its own graph
//! so batch elements can run on separate threads; the batch loss is built
//! on a small graph over the stacked logits and embeddings, and its input
//! gradients are pushed back through every sample graph. Parameter
//! gradients are summed in batch order so results do not depend on thread
//! scheduling.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::metrics::{report_from_clips, ClipPrediction, MetricsReport};
use super::schedule::cyclic_lr;
use crate::data::{apply_augment, AugmentParams, Clip, Cohort, FoldPlan, Label};
use crate::error::{Error, Result};
use crate::loss::{hp_loss, AdCorreState, HpLossParams, LossKind};
use crate::model::{McVivit, ModelConfig, ModelOutput};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Largest supported number of embedding sets: the head embedding and the
/// encoder feature.
pub const MAX_FEATURE_SETS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Steps per learning-rate cycle; 0 means two epochs.
    pub cycle_len: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub hp: HpLossParams,
    pub augment: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 30,
            max_steps: 0,
            base_lr: 1e-6,
            max_lr: 1e-4,
            cycle_len: 0,
            seed: 0,
            loss: LossKind::Hp,
            hp: HpLossParams::default(),
            augment: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} must be >= 2", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.base_lr > 0.0 && self.max_lr >= self.base_lr && self.max_lr.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < base_lr <= max_lr, got {} and {}",
                self.base_lr, self.max_lr
            )));
        }
        if self.cycle_len == 1 {
            return Err(Error::Config("cycle_len must be >= 2 (or 0 for two epochs)".into()));
        }
        if self.hp.k_feature_sets > MAX_FEATURE_SETS {
            return Err(Error::Config(format!(
                "k_feature_sets {} exceeds the {MAX_FEATURE_SETS} embedding sets the model exposes",
                self.hp.k_feature_sets
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn resolved_cycle_len(&self, n_train: usize) -> usize {
        if self.cycle_len == 0 {
            (2 * self.steps_per_epoch(n_train)).max(2)
        } else {
            self.cycle_len
        }
    }
}

/// Loss and summed parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<S> {
    pub grads: Vec<Tensor<S>>,
    pub loss: f64,
    pub focal: f64,
    pub fd: f64,
}

/// Embedding sets fed to the discriminator for one forward pass.
pub fn feature_sets(out: &ModelOutput, k: usize) -> Vec<Var> {
    [out.embedding, out.encoder.y_ff].into_iter().take(k).collect()
}

struct SampleGraph<S> {
    graph: Graph<S>,
    params: Vec<Var>,
    logits: Var,
    sets: Vec<Var>,
}

fn stack<S: Scalar>(rows: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let width = rows[0].numel();
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.numel() != width {
            return Err(Error::shape("stack", format!("row {:?} vs width {width}", r.shape())));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::from_vec(&[rows.len(), width], data)
}

/// Forward and backward over one batch. `state` is read for the loss
/// weights and then updated with this batch's predictions.
pub fn batch_gradients<S: Scalar>(
    model: &McVivit<S>,
    clips: &[Tensor<S>],
    labels: &[usize],
    state: &mut AdCorreState,
    hp: &HpLossParams,
    kind: LossKind,
) -> Result<BatchGradients<S>> {
    if clips.len() != labels.len() || clips.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} clips for {} labels",
            clips.len(),
            labels.len()
        )));
    }
    let k = hp.k_feature_sets;
    let mut samples = clips
        .par_iter()
        .map(|clip| {
            let mut graph = Graph::new();
            let bound = model.bind(&mut graph, true)?;
            let out = model.forward(&mut graph, &bound, clip)?;
            Ok(SampleGraph {
                params: bound.vars().to_vec(),
                logits: out.logits,
                sets: feature_sets(&out, k),
                graph,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut lg = Graph::new();
    let logit_rows: Vec<&Tensor<S>> = samples.iter().map(|s| s.graph.value(s.logits)).collect();
    let logits = lg.param(stack(&logit_rows)?)?;
    let mut set_vars = Vec::with_capacity(k);
    for l in 0..k {
        let rows: Vec<&Tensor<S>> = samples.iter().map(|s| s.graph.value(s.sets[l])).collect();
        set_vars.push(lg.param(stack(&rows)?)?);
    }
    let terms = hp_loss(&mut lg, logits, &set_vars, labels, state, hp, kind)?;
    lg.backward(terms.loss)?;

    let row_grads = |v: Var| -> Option<Vec<Tensor<S>>> {
        let g = lg.grad(v)?;
        let w = g.shape()[1];
        Some(
            g.data()
                .chunks_exact(w)
                .map(|r| Tensor::from_vec(&[w], r.to_vec()).expect("non-empty row"))
                .collect(),
        )
    };
    let logit_grads = row_grads(logits);
    let set_grads: Vec<Option<Vec<Tensor<S>>>> = set_vars.iter().map(|&v| row_grads(v)).collect();

    let per_sample = samples
        .par_iter_mut()
        .enumerate()
        .map(|(i, s)| {
            let mut seeds = Vec::with_capacity(1 + k);
            if let Some(g) = &logit_grads {
                seeds.push((s.logits, g[i].clone()));
            }
            for (l, grads) in set_grads.iter().enumerate() {
                if let Some(g) = grads {
                    seeds.push((s.sets[l], g[i].clone()));
                }
            }
            s.graph.backward_from(seeds)?;
            let grads: Vec<Option<Tensor<S>>> = s.params.iter().map(|&p| s.graph.take_grad(p)).collect();
            Ok(grads)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads: Vec<Tensor<S>> = model
        .store()
        .values()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    for sample in per_sample {
        for (acc, g) in grads.iter_mut().zip(sample) {
            if let Some(g) = g {
                acc.add_assign(&g)?;
            }
        }
    }
    Ok(BatchGradients {
        grads,
        loss: lg.value(terms.loss).item().as_f64(),
        focal: terms.focal,
        fd: terms.fd,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub focal: f64,
    pub fd: f64,
}

/// Optimizer, schedule and discriminator state around a model.
pub struct Trainer<S> {
    model: McVivit<S>,
    adam: Adam<S>,
    state: AdCorreState,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl<S: Scalar> Trainer<S> {
    /// `stream` separates the shuffling/augmentation draws of runs that share
    /// a seed, such as the folds of one cross-validation.
    pub fn new(model: McVivit<S>, config: TrainConfig, stream: u64) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, model.store().values());
        let state = config.hp.new_state(2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        Ok(Trainer {
            model,
            adam,
            state,
            config,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &McVivit<S> {
        &self.model
    }

    pub fn into_model(self) -> McVivit<S> {
        self.model
    }

    pub fn state(&self) -> &AdCorreState {
        &self.state
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step on already prepared clips.
    pub fn train_step(&mut self, clips: &[Tensor<S>], labels: &[usize], lr: f64) -> Result<BatchGradients<S>> {
        let batch = batch_gradients(
            &self.model,
            clips,
            labels,
            &mut self.state,
            &self.config.hp,
            self.config.loss,
        )?;
        self.adam.step(self.model.store_mut().values_mut(), &batch.grads, lr)?;
        self.step += 1;
        Ok(batch)
    }

    /// Runs the configured epochs over `clips`, resetting the discriminator
    /// state at every epoch boundary.
    pub fn fit(&mut self, clips: &[&Clip]) -> Result<Vec<StepLog>> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument("no training clips".into()));
        }
        let cycle = self.config.resolved_cycle_len(clips.len());
        let mut log = Vec::new();
        let mut order: Vec<usize> = (0..clips.len()).collect();
        'epochs: for epoch in 0..self.config.epochs {
            self.state.reset();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                if self.config.max_steps > 0 && self.step >= self.config.max_steps {
                    break 'epochs;
                }
                let params: Vec<AugmentParams> = chunk
                    .iter()
                    .map(|_| {
                        if self.config.augment {
                            AugmentParams::sample(&mut self.rng)
                        } else {
                            AugmentParams::identity()
                        }
                    })
                    .collect();
                let batch: Vec<Tensor<S>> = chunk
                    .par_iter()
                    .zip(&params)
                    .map(|(&i, p)| {
                        let frames = &clips[i].frames;
                        if p.is_identity() {
                            frames.cast()
                        } else {
                            apply_augment(frames, p).cast()
                        }
                    })
                    .collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| clips[i].label.index()).collect();
                let lr = cyclic_lr(self.step, self.config.base_lr, self.config.max_lr, cycle);
                let step = self.step;
                let out = self.train_step(&batch, &labels, lr)?;
                log::debug!(
                    "step {step} epoch {epoch} lr {lr:.3e} loss {:.5} focal {:.5} fd {:.5}",
                    out.loss,
                    out.focal,
                    out.fd
                );
                log.push(StepLog {
                    step,
                    epoch,
                    lr,
                    loss: out.loss,
                    focal: out.focal,
                    fd: out.fd,
                });
            }
        }
        Ok(log)
    }
}

/// MCI probability for every clip, in input order, on un-augmented frames.
pub fn evaluate<S: Scalar>(model: &McVivit<S>, clips: &[&Clip]) -> Result<Vec<ClipPrediction>> {
    clips
        .par_iter()
        .map(|c| {
            Ok(ClipPrediction {
                subject_id: c.subject_id.clone(),
                clip_index: c.clip_index,
                label: c.label,
                probability: model.predict_proba(&c.frames)?,
            })
        })
        .collect()
}

/// Outcome of training on all folds but one and evaluating on it.
pub struct FoldOutcome<S> {
    pub report: MetricsReport,
    pub predictions: Vec<ClipPrediction>,
    pub history: Vec<StepLog>,
    pub model: McVivit<S>,
}

/// Model initialisation seed for one fold of a run.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64)
}

/// Train/eval clip split for `fold`; errors if a subject would land on both
/// sides or the training side is empty.
pub fn split_fold<'a>(cohort: &'a Cohort, plan: &FoldPlan, fold: usize) -> Result<(Vec<&'a Clip>, Vec<&'a Clip>)> {
    if plan.n_video() != cohort.subjects.len() {
        return Err(Error::InvalidArgument(format!(
            "fold plan covers {} videos, cohort has {} subjects",
            plan.n_video(),
            cohort.subjects.len()
        )));
    }
    if fold >= plan.k {
        return Err(Error::InvalidArgument(format!("fold {fold} out of range for {} folds", plan.k)));
    }
    let eval_ids: BTreeSet<&str> = plan
        .members(fold)
        .into_iter()
        .map(|i| cohort.subjects[i].id.as_str())
        .collect();
    let train_ids: BTreeSet<&str> = plan
        .train_members(fold)
        .into_iter()
        .map(|i| cohort.subjects[i].id.as_str())
        .collect();
    if let Some(id) = eval_ids.intersection(&train_ids).next() {
        return Err(Error::InvalidArgument(format!("subject {id} is in both splits of fold {fold}")));
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for c in &cohort.clips {
        if eval_ids.contains(c.subject_id.as_str()) {
            eval.push(c);
        } else if train_ids.contains(c.subject_id.as_str()) {
            train.push(c);
        }
    }
    if train.is_empty() {
        return Err(Error::EmptyTrainingSplit(fold));
    }
    Ok((train, eval))
}

pub fn train_fold<S: Scalar>(
    cohort: &Cohort,
    plan: &FoldPlan,
    fold: usize,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<FoldOutcome<S>> {
    let (train, eval) = split_fold(cohort, plan, fold)?;
    let model = McVivit::new(model_config.clone(), fold_seed(config.seed, fold))?;
    let mut trainer = Trainer::new(model, config.clone(), fold as u64 + 1)?;
    let history = trainer.fit(&train)?;
    let model = trainer.into_model();
    let predictions = evaluate(&model, &eval)?;
    let report = report_from_clips(Some(fold), &predictions)?;
    log::info!(
        "fold {fold}: {} train clips, {} eval clips, subject accuracy {:?}",
        train.len(),
        eval.len(),
        report.accuracy
    );
    Ok(FoldOutcome {
        report,
        predictions,
        history,
        model,
    })
}

/// Trains on every clip in `train` and scores `eval`; used when the split is
/// given explicitly rather than by a fold plan.
pub fn train_and_evaluate<S: Scalar>(
    train: &[&Clip],
    eval: &[&Clip],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<FoldOutcome<S>> {
    let model = McVivit::new(model_config.clone(), fold_seed(config.seed, 0))?;
    let mut trainer = Trainer::new(model, config.clone(), 1)?;
    let history = trainer.fit(train)?;
    let model = trainer.into_model();
    let predictions = evaluate(&model, eval)?;
    let report = report_from_clips(None, &predictions)?;
    Ok(FoldOutcome {
        report,
        predictions,
        history,
        model,
    })
}

/// Fraction of clips whose thresholded probability matches the label.
pub fn clip_accuracy(predictions: &[ClipPrediction]) -> f64 {
    let correct = predictions
        .iter()
        .filter(|p| (p.probability >= 0.5) == (p.label == Label::Mci))
        .count();
    correct as f64 / predictions.len().max(1) as f64
}
