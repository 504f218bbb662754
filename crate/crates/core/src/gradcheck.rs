//! Central-difference gradient verification in 64-bit.

use crate::error::{Error, Result};

/// Central-difference step.
pub const STEP: f64 = 1e-4;

/// Lower bound on the relative-error denominator, so that gradients whose
/// true value is ~0 are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

/// Worst discrepancy observed for one named input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `op(inputs, want_grad)` evaluates the scalar loss; when `want_grad` is
/// true it must also return one gradient vector per input, shaped like the
/// input. Every coordinate of every input is perturbed by ±[`STEP`].
pub fn grad_check<F>(mut op: F, inputs: &[(String, Vec<f64>)], tolerance: f64) -> Result<GradReport>
where
    F: FnMut(&[Vec<f64>], bool) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (_, analytic) = op(&values, true)?;
    if analytic.len() != values.len() {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!(
                "{} gradient vectors for {} inputs",
                analytic.len(),
                values.len()
            ),
        });
    }

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        if analytic[k].len() != values[k].len() {
            return Err(Error::Shape {
                op: "grad_check",
                detail: format!(
                    "gradient for `{name}` has {} entries, input has {}",
                    analytic[k].len(),
                    values[k].len()
                ),
            });
        }
        let mut report = InputReport {
            name: name.clone(),
            len: values[k].len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..values[k].len() {
            let a = analytic[k][i];
            if !a.is_finite() {
                return Err(Error::NonFiniteGradient {
                    input: name.clone(),
                    index: i,
                    kind: "analytic",
                });
            }
            let original = values[k][i];
            values[k][i] = original + STEP;
            let (plus, _) = op(&values, false)?;
            values[k][i] = original - STEP;
            let (minus, _) = op(&values, false)?;
            values[k][i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient {
                    input: name.clone(),
                    index: i,
                    kind: "numeric",
                });
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = i;
            }
        }
        reports.push(report);
    }
    Ok(GradReport {
        tolerance,
        inputs: reports,
    })
}
