//! Finite-difference verification of the hand-derived gradients.

use crate::error::{CfrError, Result};
use crate::model::CfrParams;

/// Per-tensor worst relative error of analytic vs central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub per_param: Vec<ParamCheck>,
    pub pass: bool,
    pub eps: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Compare `analytic` against central differences of `loss_fn` at
/// `params`, entry by entry. Relative error uses
/// |a - n| / max(|a|, |n|, 1e-8).
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &CfrParams,
    analytic: &CfrParams,
    eps: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: FnMut(&CfrParams) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(CfrError::argument("eps must be positive"));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut per_param = Vec::with_capacity(names.len());
    let mut pass = true;

    for (tensor_idx, name) in names.iter().enumerate() {
        let len = params.named_tensors()[tensor_idx].1.len();
        let mut max_rel = 0.0f64;
        for entry in 0..len {
            let original = params.named_tensors()[tensor_idx].1.data()[entry];

            work.named_tensors_mut()[tensor_idx].1.data_mut()[entry] = original + eps;
            let plus = loss_fn(&work)?;
            work.named_tensors_mut()[tensor_idx].1.data_mut()[entry] = original - eps;
            let minus = loss_fn(&work)?;
            work.named_tensors_mut()[tensor_idx].1.data_mut()[entry] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(CfrError::Numeric(format!(
                    "non-finite loss while perturbing {name}[{entry}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.named_tensors()[tensor_idx].1.data()[entry];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        if max_rel > tol {
            pass = false;
        }
        per_param.push(ParamCheck { name: name.clone(), max_rel_error: max_rel });
    }

    Ok(GradReport { per_param, pass, eps, tolerance: tol })
}
