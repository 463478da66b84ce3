//! Correlation-based feature discriminator: pairs of embeddings are pushed
//! toward correlation +1 when their labels agree and -1 otherwise, weighted
//! by how badly the classes involved are currently recognised.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Running `(true, predicted)` confusion counts over `k` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdCorreState {
    k: usize,
    /// Row-major `k x k`, rows are true labels.
    confusion: Vec<u64>,
    epsilon: f64,
}

impl AdCorreState {
    pub fn new(k: usize, epsilon: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
        }
        Ok(AdCorreState {
            k,
            confusion: vec![0; k * k],
            epsilon,
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.confusion[truth * self.k + predicted]
    }

    pub fn update_confusion(&mut self, predicted: &[usize], truth: &[usize]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        for &l in predicted.iter().chain(truth) {
            if l >= self.k {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.k,
                });
            }
        }
        for (&p, &t) in predicted.iter().zip(truth) {
            self.confusion[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Diagonal of the row-normalised confusion matrix; 0 for unseen classes.
    pub fn recall(&self, class: usize) -> f64 {
        let row = &self.confusion[class * self.k..(class + 1) * self.k];
        let total: u64 = row.iter().sum();
        if total == 0 {
            0.0
        } else {
            row[class] as f64 / total as f64
        }
    }

    /// `1 - recall + epsilon`.
    pub fn omega(&self, class: usize) -> f64 {
        1.0 - self.recall(class) + self.epsilon()
    }

    pub fn reset(&mut self) {
        self.confusion.iter_mut().for_each(|c| *c = 0);
    }
}

fn square<S: Scalar>(n: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<S> {
    let data: Vec<f64> = (0..n * n).map(|ij| f(ij / n, ij % n)).collect();
    Tensor::from_f64(&[n, n], &data).expect("positive square shape")
}

/// Ones off the diagonal, zeros on it.
pub fn beta_matrix<S: Scalar>(n: usize) -> Result<Tensor<S>> {
    if n == 0 {
        return Err(Error::InvalidArgument("beta matrix needs n >= 1".into()));
    }
    Ok(square(n, |i, j| if i == j { 0.0 } else { 1.0 }))
}

/// `omega(l_i) + omega(l_j)`.
pub fn attention_map<S: Scalar>(state: &AdCorreState, labels: &[usize]) -> Result<Tensor<S>> {
    check_labels(labels, state.classes())?;
    let w: Vec<f64> = labels.iter().map(|&l| state.omega(l)).collect();
    Ok(square(labels.len(), |i, j| w[i] + w[j]))
}

/// `+1` where labels agree, `-1` elsewhere.
pub fn harmony_matrix<S: Scalar>(labels: &[usize]) -> Result<Tensor<S>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    Ok(square(labels.len(), |i, j| if labels[i] == labels[j] { 1.0 } else { -1.0 }))
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    match labels.iter().find(|&&l| l >= k) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: k }),
        None => Ok(()),
    }
}

/// Pearson correlation between the rows of `[n, d]`. The diagonal is 1; a
/// row with zero variance correlates 0 with every other row.
pub fn correlation_matrix(embeddings: &Tensor<f64>) -> Result<Tensor<f64>> {
    let shape = embeddings.shape();
    if shape.len() != 2 {
        return Err(Error::shape("correlation_matrix", format!("{shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let centred: Vec<Vec<f64>> = embeddings
        .data()
        .chunks_exact(d)
        .map(|row| {
            let mu = row.iter().sum::<f64>() / d as f64;
            row.iter().map(|v| v - mu).collect()
        })
        .collect();
    let sq: Vec<f64> = centred.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = if sq[i] > 0.0 && sq[j] > 0.0 {
                let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
                // sqrt(s * s) == s exactly, so identical rows give exactly 1.
                (dot / (sq[i] * sq[j]).sqrt()).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out[i * n + j] = c;
            out[j * n + i] = c;
        }
    }
    Tensor::from_vec(&[n, n], out)
}

/// Detached per-cell weights `beta * omega / (k n^2)`.
fn cell_weights<S: Scalar>(state: &AdCorreState, labels: &[usize], k: usize) -> Result<Tensor<S>> {
    let n = labels.len();
    let norm = 1.0 / (k * n * n) as f64;
    let omega: Tensor<f64> = attention_map(state, labels)?;
    Ok(square(n, |i, j| {
        if i == j {
            0.0
        } else {
            omega.data()[i * n + j] * norm
        }
    }))
}

fn check_sets<S: Scalar>(g: &Graph<S>, sets: &[Var], n: usize) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("at least one embedding set required".into()));
    }
    for &s in sets {
        let shape = g.shape(s);
        if shape.len() != 2 || shape[0] != n {
            return Err(Error::shape(
                "fd_loss",
                format!("embeddings {shape:?} for {n} labels"),
            ));
        }
    }
    Ok(())
}

/// Plain evaluation of the discriminator over `k = sets.len()` embedding
/// sets, each `[n, d_l]`.
pub fn fd_value(sets: &[Tensor<f64>], labels: &[usize], state: &AdCorreState) -> Result<f64> {
    let n = labels.len();
    if sets.is_empty() {
        return Err(Error::InvalidArgument("at least one embedding set required".into()));
    }
    if n < 2 {
        return Ok(0.0);
    }
    let w: Tensor<f64> = cell_weights(state, labels, sets.len())?;
    let phi: Tensor<f64> = harmony_matrix(labels)?;
    let mut total = 0.0;
    for set in sets {
        if set.rank() != 2 || set.shape()[0] != n {
            return Err(Error::shape("fd_value", format!("embeddings {:?} for {n} labels", set.shape())));
        }
        let corm = correlation_matrix(set)?;
        for ((w, p), c) in w.data().iter().zip(phi.data()).zip(corm.data()) {
            total += w * (p - c).abs();
        }
    }
    Ok(total)
}

/// Differentiable discriminator term. Only the correlation matrix carries
/// gradient. Fewer than two samples give a constant 0.
pub fn fd_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    sets: &[Var],
    labels: &[usize],
    state: &AdCorreState,
) -> Result<Var> {
    let n = labels.len();
    check_sets(g, sets, n)?;
    if n < 2 {
        check_labels(labels, state.classes())?;
        return g.constant(Tensor::scalar(S::zero()));
    }
    let w = g.constant(cell_weights(state, labels, sets.len())?)?;
    let phi = g.constant(harmony_matrix(labels)?)?;
    let mut terms = Vec::with_capacity(sets.len());
    for &set in sets {
        let u = g.center_normalize(set)?;
        let ut = g.transpose(u)?;
        let corm = g.matmul(u, ut)?;
        let diff = g.sub(phi, corm)?;
        let diff = g.abs(diff)?;
        let cells = g.mul(diff, w)?;
        terms.push(g.sum(cells)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}
