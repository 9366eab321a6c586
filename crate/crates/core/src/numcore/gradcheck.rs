use crate::error::{LmnError, Result};
use crate::numcore::ParamStore;
use crate::Scalar;

/// A scalar loss over a parameter store together with its analytic gradient.
pub trait Objective<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Loss at the current parameter values.
    fn loss(&self) -> Result<T>;
    /// Writes the analytic gradient of [`Objective::loss`] into the store's
    /// gradient buffers (overwriting them) and returns the loss.
    fn compute_gradients(&mut self) -> Result<T>;
}

/// Result of a central-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[flat index]` of the worst entry.
    pub worst: String,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

/// Compares every analytic gradient entry against
/// `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// The relative error of an entry is `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn backprop_check<T: Scalar, O: Objective<T>>(
    obj: &mut O,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let base = obj.compute_gradients()?;
    if !base.is_finite() {
        return Err(LmnError::CheckFailed {
            location: "base point".into(),
            message: "loss is not finite".into(),
        });
    }
    let analytic: Vec<Vec<T>> = obj
        .params()
        .params()
        .iter()
        .map(|p| p.grad.as_slice().to_vec())
        .collect();
    let ids: Vec<_> = obj.params().ids().collect();
    let eps_t = T::lit(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries_checked: 0,
        tolerance: tol,
    };
    for (pi, id) in ids.into_iter().enumerate() {
        let count = obj.params().value(id).as_slice().len();
        for j in 0..count {
            let orig = obj.params().value(id).as_slice()[j];
            obj.params_mut().value_mut(id).as_mut_slice()[j] = orig + eps_t;
            let plus = obj.loss();
            obj.params_mut().value_mut(id).as_mut_slice()[j] = orig - eps_t;
            let minus = obj.loss();
            obj.params_mut().value_mut(id).as_mut_slice()[j] = orig;
            let location = format!("{}[{j}]", obj.params().name(id));
            let (plus, minus) = (plus?.as_f64(), minus?.as_f64());
            if !plus.is_finite() || !minus.is_finite() {
                return Err(LmnError::CheckFailed {
                    location,
                    message: "perturbed loss is not finite".into(),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][j].as_f64();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            if report.worst.is_empty() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = location;
            }
        }
    }
    Ok(report)
}
