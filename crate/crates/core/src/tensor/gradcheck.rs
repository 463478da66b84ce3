//! Central-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the graph gradient of `f` at `params` against central differences.
///
/// `f` receives a fresh graph and the parameter leaves and must return a
/// scalar node.
pub fn gradcheck<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect::<Vec<_>>();

    let value = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ps
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    compare_gradients(&analytic, value, params, step)
}

/// Symmetric finite-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error `O(h^2)`.
    ThreePoint,
    /// `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`, truncation error
    /// `O(h^4)`, which allows larger steps and less round-off.
    FivePoint,
}

/// Compares precomputed `analytic` gradients with three-point central
/// differences of `value` taken elementwise over every parameter.
pub fn compare_gradients<V>(
    analytic: &[Tensor<f64>],
    value: V,
    params: &[Tensor<f64>],
    step: f64,
) -> Result<GradCheckReport>
where
    V: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    compare_gradients_with(analytic, value, params, step, Stencil::ThreePoint)
}

pub fn compare_gradients_with<V>(
    analytic: &[Tensor<f64>],
    mut value: V,
    params: &[Tensor<f64>],
    step: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    V: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        n_checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::shape(
                "gradcheck",
                format!("gradient {:?} for parameter {:?}", grad.shape(), params[pi].shape()),
            ));
        }
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[ei] = orig + offset;
                let v = value(&work)?;
                work[pi].data_mut()[ei] = orig;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite { op: "gradcheck" })
                }
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::FivePoint => {
                    let (p1, m1) = (at(step)?, at(-step)?);
                    let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
                    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step)
                }
            };
            let a = grad.data()[ei];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || report.n_checked == 0 {
                report.max_rel_error = err;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}
