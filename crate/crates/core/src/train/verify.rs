//! Finite-difference verification of the full training gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::trainer::{batch_gradients, feature_sets};
use crate::error::Result;
use crate::loss::{hp_loss_value, HpLossParams, LossKind};
use crate::model::{McVivit, ModelConfig};
use crate::tensor::{compare_gradients_with, GradCheckReport, Graph, Stencil, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradcheck {
    pub n_parameters: usize,
    pub batch: usize,
    pub loss: LossKind,
    pub report: GradCheckReport,
}

impl ModelGradcheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

/// Checks every parameter gradient of the small model under the training
/// loss on a random batch, with the discriminator state frozen at a fixed
/// non-trivial history.
pub fn model_gradcheck(seed: u64, kind: LossKind, step: f64) -> Result<ModelGradcheck> {
    let config = ModelConfig::tiny();
    let model = McVivit::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let labels = [1usize, 0, 1, 0];
    let shape = config.clip_shape();
    let clips: Vec<Tensor<f64>> = labels
        .iter()
        .map(|_| {
            let n = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            Tensor::from_vec(&shape, data)
        })
        .collect::<Result<_>>()?;
    let hp = HpLossParams::default();
    let mut state = hp.new_state(2)?;
    state.update_confusion(&[1, 0, 0, 1, 1], &[1, 1, 0, 0, 1])?;

    let analytic = batch_gradients(&model, &clips, &labels, &mut state.clone(), &hp, kind)?.grads;
    let value = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut m = model.clone();
        m.store_mut().set_values(ps.to_vec())?;
        let mut logits = Vec::with_capacity(2 * clips.len());
        let mut sets: Vec<Vec<f64>> = vec![Vec::new(); hp.k_feature_sets];
        let mut widths = vec![0; hp.k_feature_sets];
        for clip in &clips {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false)?;
            let out = m.forward(&mut g, &b, clip)?;
            logits.extend_from_slice(g.value(out.logits).data());
            for (l, v) in feature_sets(&out, hp.k_feature_sets).into_iter().enumerate() {
                widths[l] = g.value(v).numel();
                sets[l].extend_from_slice(g.value(v).data());
            }
        }
        let logits = Tensor::from_vec(&[clips.len(), 2], logits)?;
        let sets = sets
            .into_iter()
            .zip(&widths)
            .map(|(s, &w)| Tensor::from_vec(&[clips.len(), w], s))
            .collect::<Result<Vec<_>>>()?;
        hp_loss_value(&logits, &sets, &labels, &state, &hp, kind)
    };
    let report = compare_gradients_with(&analytic, value, model.store().values(), step, Stencil::FivePoint)?;
    Ok(ModelGradcheck {
        n_parameters: model.num_parameters(),
        batch: clips.len(),
        loss: kind,
        report,
    })
}
