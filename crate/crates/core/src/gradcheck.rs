//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::autograd::{BackwardFault, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst entry-wise relative error per named parameter.
    pub per_parameter_errors: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn from_errors(per_parameter_errors: Vec<(String, f64)>) -> Self {
        let max_relative_error = per_parameter_errors
            .iter()
            .map(|(_, e)| *e)
            .fold(0.0, f64::max);
        Self {
            max_relative_error,
            per_parameter_errors,
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A scalar function of a list of tensors that can also report its
/// analytic gradient.
pub trait Objective {
    fn evaluate(&mut self, params: &[Tensor], with_grad: bool) -> Result<(f64, Option<Vec<Tensor>>)>;
}

/// Adapts a graph-building closure into an [`Objective`]; every parameter
/// becomes a trainable leaf.
pub struct GraphObjective<F> {
    build: F,
    fault: Option<BackwardFault>,
}

impl<F> GraphObjective<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    pub fn new(build: F) -> Self {
        Self { build, fault: None }
    }

    pub fn with_fault(mut self, fault: BackwardFault) -> Self {
        self.fault = Some(fault);
        self
    }
}

impl<F> Objective for GraphObjective<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fn evaluate(&mut self, params: &[Tensor], with_grad: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut g = Graph::with_fault(self.fault);
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), with_grad)).collect();
        let out = (self.build)(&mut g, &vars)?;
        let value = g.value(out).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        let grads = g.backward(out)?;
        let tensors = vars
            .iter()
            .zip(params)
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect();
        Ok((value, Some(tensors)))
    }
}

/// Compares analytic gradients against central differences with step
/// [`FD_STEP`] for every entry of every parameter.
pub fn finite_diff_check<O: Objective>(
    params: &[(String, Tensor)],
    mut objective: O,
) -> Result<GradCheckReport> {
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.detached()).collect();
    let (f0, grads) = objective.evaluate(&values, true)?;
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("objective is not finite: {f0}")));
    }
    let grads = grads.ok_or_else(|| Error::Numerical("objective returned no gradient".into()))?;

    let mut per_param = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for ei in 0..values[pi].len() {
            let orig = values[pi].data()[ei];
            values[pi].data_mut()[ei] = orig + FD_STEP;
            let (fp, _) = objective.evaluate(&values, false)?;
            values[pi].data_mut()[ei] = orig - FD_STEP;
            let (fm, _) = objective.evaluate(&values, false)?;
            values[pi].data_mut()[ei] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective not finite while perturbing {name}[{ei}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads[pi].data()[ei], numeric));
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport::from_errors(per_param))
}
