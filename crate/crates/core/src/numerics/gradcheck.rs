use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Central differences at this step resolve gradients only to about
/// 1e-11 on O(1) losses, so magnitudes under the floor compare absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// Largest element-wise relative error for each named parameter.
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub passed: bool,
    /// Set when a loss evaluation was non-finite; names the parameter being probed.
    pub failure: Option<String>,
}

impl GradReport {
    fn failed(reason: String) -> Self {
        GradReport {
            max_relative_error: f64::INFINITY,
            per_parameter_errors: BTreeMap::new(),
            passed: false,
            failure: Some(reason),
        }
    }
}

fn evaluate<F>(loss_fn: &F, values: &[Tensor<f64>], with_grad: bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss).scalar_value();
    if !with_grad || !value.is_finite() {
        return Ok((value, None));
    }
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .zip(values)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, Some(out)))
}

/// Compares the tape's reverse-mode gradient of `loss_fn` with central finite
/// differences, element by element, in 64-bit arithmetic.
///
/// `loss_fn` receives the parameters bound as leaves, in the order given.
pub fn check_gradient<F>(loss_fn: F, params: &[(String, Tensor<f64>)], tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (base, analytic) = evaluate(&loss_fn, &values, true)?;
    match analytic {
        Some(analytic) => compare_with_finite_differences(loss_fn, params, &analytic, tolerance),
        None => Ok(GradReport::failed(format!(
            "non-finite loss {base} at the unperturbed point"
        ))),
    }
}

/// Finite-difference comparison against a caller-supplied gradient.
pub fn compare_with_finite_differences<F>(
    loss_fn: F,
    params: &[(String, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradReport {
        max_relative_error: 0.0,
        per_parameter_errors: BTreeMap::new(),
        passed: false,
        failure: None,
    };
    for (p, (name, _)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..values[p].numel() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + FD_STEP;
            let (plus, _) = evaluate(&loss_fn, &values, false)?;
            values[p].data_mut()[i] = orig - FD_STEP;
            let (minus, _) = evaluate(&loss_fn, &values, false)?;
            values[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                let mut failed = GradReport::failed(format!("non-finite loss while perturbing {name}[{i}]"));
                failed.per_parameter_errors.insert(name.clone(), f64::INFINITY);
                return Ok(failed);
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let exact = analytic[p].data()[i];
            let denom = exact.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((exact - numeric).abs() / denom);
        }
        report.per_parameter_errors.insert(name.clone(), worst);
        report.max_relative_error = report.max_relative_error.max(worst);
    }
    report.passed = report.max_relative_error < tolerance;
    Ok(report)
}
