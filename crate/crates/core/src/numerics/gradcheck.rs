//! Central-difference verification of analytic gradients.

use super::ParamTree;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Path and flat index of the entry with the largest error.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// Every entry of every leaf is perturbed by `±eps`. The error for one entry
/// is `|a - fd| / max(1e-8, |a| + |fd|)`; the report carries the maximum.
pub fn grad_check<T, F>(mut f: F, params: &ParamTree<T>, analytic: &ParamTree<T>, eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamTree<T>) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    let paths: Vec<String> = params.paths().map(str::to_owned).collect();
    for path in &paths {
        let grad = analytic
            .get(path)
            .ok_or_else(|| Error::invalid(format!("analytic gradient lacks {path}")))?;
        let len = params.get(path).map_or(0, |m| m.len());
        if grad.len() != len {
            return Err(Error::shape("grad_check", format!("{path}: gradient size differs")));
        }
        for i in 0..len {
            let original = probe.get(path).expect("path exists").as_slice()[i];
            probe.get_mut(path).expect("path exists").as_mut_slice()[i] = original + eps;
            let plus = f(&probe)?;
            probe.get_mut(path).expect("path exists").as_mut_slice()[i] = original - eps;
            let minus = f(&probe)?;
            probe.get_mut(path).expect("path exists").as_mut_slice()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective perturbed at {path}[{i}]")));
            }
            let numeric = ((plus - minus) / (eps + eps)).to_f64_lossy();
            let a = grad.as_slice()[i].to_f64_lossy();
            let err = (a - numeric).abs() / REL_ERROR_FLOOR.max(a.abs() + numeric.abs());
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((path.clone(), i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
