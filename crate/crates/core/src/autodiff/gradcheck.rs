//! Central finite differences, used as an independent oracle for `Tape::backward`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `point`.
///
/// Each coordinate is perturbed by `±h`; a non-finite evaluation aborts with
/// the offending coordinate.
pub fn finite_diff_gradient<F>(mut f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("step must be positive, got {h}")));
    }
    let mut probe = point.clone().with_requires_grad(false);
    probe.clear_grad();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = point.values()[i];
        probe.values_mut()[i] = x + h;
        let plus = f(&probe)?;
        probe.values_mut()[i] = x - h;
        let minus = f(&probe)?;
        probe.values_mut()[i] = x;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    coordinate: i,
                    value,
                });
            }
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(point.shape().to_vec(), grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over coordinates that exceed the absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Compares two gradients. Coordinates whose absolute difference is within
/// `abs_floor` count as exact.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        let rel = if abs <= abs_floor {
            0.0
        } else {
            abs / a.abs().max(n.abs())
        };
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report
}
