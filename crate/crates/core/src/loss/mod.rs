//! Training objective: focal loss on the class probabilities plus a
//! confusion-weighted correlation penalty on the head embeddings.

pub mod fd;
pub mod focal;

use serde::{Deserialize, Serialize};

pub use fd::{
    attention_map, beta_matrix, correlation_matrix, fd_loss_graph, fd_value, harmony_matrix,
    AdCorreState, DEFAULT_EPSILON,
};
pub use focal::{focal_loss, focal_loss_graph, focal_term, p_mci, FocalParams, P_CLAMP};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Focal plus `lambda` times the discriminator.
    Hp,
    Focal,
    Fd,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Hp => "hp",
            LossKind::Focal => "focal",
            LossKind::Fd => "fd",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hp" => Ok(LossKind::Hp),
            "focal" => Ok(LossKind::Focal),
            "fd" => Ok(LossKind::Fd),
            other => Err(Error::Config(format!("unknown loss '{other}', expected hp, focal or fd"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpLossParams {
    pub lambda: f64,
    pub focal: FocalParams,
    /// Number of embedding sets averaged by the discriminator.
    pub k_feature_sets: usize,
    /// Floor added to the per-class attention weight.
    pub epsilon: f64,
}

impl Default for HpLossParams {
    fn default() -> Self {
        HpLossParams {
            lambda: 0.5,
            focal: FocalParams::default(),
            k_feature_sets: 1,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl HpLossParams {
    pub fn validate(&self) -> Result<()> {
        self.focal.validate()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.k_feature_sets == 0 {
            return Err(Error::Config("k_feature_sets must be >= 1".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }

    pub fn new_state(&self, classes: usize) -> Result<AdCorreState> {
        AdCorreState::new(classes, self.epsilon)
    }
}

/// Graph handle of the loss plus the values of both terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub loss: Var,
    pub focal: f64,
    pub fd: f64,
}

fn combine(kind: LossKind, lambda: f64, focal: f64, fd: f64) -> f64 {
    match kind {
        LossKind::Hp => focal + lambda * fd,
        LossKind::Focal => focal,
        LossKind::Fd => fd,
    }
}

fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Records the loss for a batch with logits `[n, 2]` and `k` embedding sets
/// `[n, d_l]`, then folds this batch's argmax predictions into `state`.
pub fn hp_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    sets: &[Var],
    labels: &[usize],
    state: &mut AdCorreState,
    params: &HpLossParams,
    kind: LossKind,
) -> Result<LossTerms> {
    if sets.len() != params.k_feature_sets {
        return Err(Error::InvalidArgument(format!(
            "{} embedding sets supplied, k_feature_sets is {}",
            sets.len(),
            params.k_feature_sets
        )));
    }
    let focal = focal_loss_graph(g, logits, labels, &params.focal)?;
    let fd = fd_loss_graph(g, sets, labels, state)?;
    let loss = match kind {
        LossKind::Hp => {
            let weighted = g.scale(fd, S::of(params.lambda))?;
            g.add(focal, weighted)?
        }
        LossKind::Focal => focal,
        LossKind::Fd => fd,
    };
    let terms = LossTerms {
        loss,
        focal: g.value(focal).item().as_f64(),
        fd: g.value(fd).item().as_f64(),
    };
    let predicted = argmax_rows(g.value(logits));
    state.update_confusion(&predicted, labels)?;
    Ok(terms)
}

/// Plain evaluation of the same objective; `state` is left untouched.
pub fn hp_loss_value(
    logits: &Tensor<f64>,
    sets: &[Tensor<f64>],
    labels: &[usize],
    state: &AdCorreState,
    params: &HpLossParams,
    kind: LossKind,
) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[1] != 2 {
        return Err(Error::shape("hp_loss_value", format!("logits {:?}", logits.shape())));
    }
    let p: Vec<f64> = logits
        .data()
        .chunks_exact(2)
        .map(|c| crate::model::mci_probability(c[0], c[1]))
        .collect();
    let focal = focal_loss(&p, labels, &params.focal)?;
    let fd = fd_value(sets, labels, state)?;
    Ok(combine(kind, params.lambda, focal, fd))
}
