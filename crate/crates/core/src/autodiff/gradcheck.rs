//! Central-difference verification of analytic parameter gradients.

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

/// Anything with parameters and a scalar loss on some input.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records a deterministic scalar loss for `input` on `graph`.
    fn loss(&self, graph: &mut Graph, input: &Tensor) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over parameter entries of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

fn loss_value<M: Objective + ?Sized>(model: &M, input: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, input)?;
    Ok(g.value(loss).data()[0])
}

/// Analytic gradients, one tensor per parameter in store order.
pub fn analytic_gradients<M: Objective + ?Sized>(model: &M, input: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, input)?;
    let mut store = model.params().clone();
    g.backward(loss, &mut store)?;
    Ok(store.iter().map(|p| p.grad.clone()).collect())
}

/// Compares `analytic` against central differences of the model loss.
///
/// Never fails: a broken forward pass is reported as an infinite error.
pub fn compare_with_finite_differences<M: Objective + ?Sized>(
    model: &mut M,
    input: &Tensor,
    epsilon: f64,
    analytic: &[Tensor],
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let n = model.params().len();
    for (pi, analytic_p) in analytic.iter().enumerate().take(n) {
        let id = ParamId(pi);
        let name = model.params().get(id).name.clone();
        for j in 0..analytic_p.len() {
            let original = model.params().value(id).data()[j];
            let eval_at = |v: f64, m: &mut M| {
                m.params_mut().get_mut(id).value.data_mut()[j] = v;
                loss_value(m, input)
            };
            let plus = eval_at(original + epsilon, model);
            let minus = eval_at(original - epsilon, model);
            model.params_mut().get_mut(id).value.data_mut()[j] = original;
            let err = match (plus, minus) {
                (Ok(p), Ok(m)) => {
                    let numeric = (p - m) / (2.0 * epsilon);
                    let a = analytic_p.data()[j];
                    (a - numeric).abs() / a.abs().max(1.0)
                }
                _ => f64::INFINITY,
            };
            report.checked += 1;
            // NaN errors must also land in the report.
            if err.is_nan() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{name}[{j}]");
            }
        }
    }
    report
}

/// Max relative error between backward-pass gradients and central
/// differences over every parameter entry of `model`.
pub fn finite_difference_check<M: Objective + ?Sized>(
    model: &mut M,
    input: &Tensor,
    epsilon: f64,
) -> GradCheckReport {
    match analytic_gradients(model, input) {
        Ok(analytic) => compare_with_finite_differences(model, input, epsilon, &analytic),
        Err(e) => GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst_param: format!("<forward failed: {e}>"),
            checked: 0,
        },
    }
}
