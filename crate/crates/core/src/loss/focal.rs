//! Binary focal loss with MCI as class 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    /// Weight of the MCI class; NC gets `1 - alpha`.
    pub alpha: f64,
    /// Focusing exponent.
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("focal alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }

    /// Class weight for a sample with label index `y`.
    pub fn class_weight(&self, y: usize) -> f64 {
        if y == 1 {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

fn check_label(y: usize) -> Result<()> {
    if y > 1 {
        return Err(Error::LabelOutOfRange { label: y, classes: 2 });
    }
    Ok(())
}

/// Probability assigned to the true class: `p` for MCI, `1 - p` for NC,
/// clamped away from 0 and 1.
pub fn p_mci(p: f64, y: usize) -> Result<f64> {
    check_label(y)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    let q = if y == 1 { p } else { 1.0 - p };
    Ok(q.clamp(P_CLAMP, 1.0 - P_CLAMP))
}

/// `-alpha_y (1 - p_y)^gamma ln p_y` for one sample.
pub fn focal_term(p: f64, y: usize, params: &FocalParams) -> Result<f64> {
    let q = p_mci(p, y)?;
    Ok(-params.class_weight(y) * (1.0 - q).powf(params.gamma) * q.ln())
}

/// Mean focal term over a batch of MCI probabilities.
pub fn focal_loss(p: &[f64], y: &[usize], params: &FocalParams) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities for {} labels",
            p.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        total += focal_term(pi, yi, params)?;
    }
    Ok(total / p.len() as f64)
}

/// Differentiable mean focal loss from logits `[n, 2]`.
pub fn focal_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    labels: &[usize],
    params: &FocalParams,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "focal_loss",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let n = labels.len();
    let mut offset = Vec::with_capacity(n);
    let mut sign = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    for &y in labels {
        check_label(y)?;
        offset.push(if y == 1 { 0.0 } else { 1.0 });
        sign.push(if y == 1 { 1.0 } else { -1.0 });
        // Negated and averaged here so the graph is a plain weighted sum.
        weight.push(-params.class_weight(y) / n as f64);
    }
    let probs = g.softmax(logits, 1)?;
    let p1 = g.narrow(probs, 1, 1, 1)?;
    let p1 = g.reshape(p1, &[n])?;
    let sign = g.constant(Tensor::from_f64(&[n], &sign)?)?;
    let offset = g.constant(Tensor::from_f64(&[n], &offset)?)?;
    let q = g.mul(p1, sign)?;
    let q = g.add(q, offset)?;
    let q = g.clamp(q, S::of(P_CLAMP), S::of(1.0 - P_CLAMP))?;
    let log_q = g.ln(q)?;
    let one_minus = g.neg(q)?;
    let one_minus = g.add_scalar(one_minus, S::one())?;
    let modulator = g.pow(one_minus, S::of(params.gamma))?;
    let term = g.mul(modulator, log_q)?;
    let weight = g.constant(Tensor::from_f64(&[n], &weight)?)?;
    let term = g.mul(term, weight)?;
    g.sum(term)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_mci_cases() {
        assert_eq!(p_mci(0.9, 1).unwrap(), 0.9);
        assert!((p_mci(0.3, 0).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(p_mci(0.5, 0).unwrap(), 0.5);
        assert_eq!(p_mci(0.5, 1).unwrap(), 0.5);
        assert_eq!(p_mci(1.0, 1).unwrap(), 1.0 - P_CLAMP);
        assert!(p_mci(f64::NAN, 1).is_err());
        assert!(p_mci(1.5, 1).is_err());
        assert!(p_mci(0.5, 2).is_err());
    }

    #[test]
    fn focal_worked_example() {
        let v = focal_term(0.9, 1, &FocalParams::default()).unwrap();
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn confident_sample_has_vanishing_loss() {
        let v = focal_term(1.0 - 1e-6, 1, &FocalParams::default()).unwrap();
        assert!(v < 1e-15);
    }

    #[test]
    fn graph_matches_scalar() {
        let logits = [0.3, -0.2, 1.5, 0.1, -0.7, 2.0];
        let labels = [1, 0, 1];
        let params = FocalParams { alpha: 0.3, gamma: 1.5 };
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64(&[3, 2], &logits).unwrap()).unwrap();
        let v = focal_loss_graph(&mut g, l, &labels, &params).unwrap();
        let p: Vec<f64> = logits
            .chunks(2)
            .map(|c| 1.0 / (1.0 + (c[0] - c[1]).exp()))
            .collect();
        let expected = focal_loss(&p, &labels, &params).unwrap();
        assert!((g.value(v).item() - expected).abs() < 1e-14);
    }
}
