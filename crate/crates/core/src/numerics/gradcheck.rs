use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so coordinates whose gradient
/// is essentially zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` with central differences of `loss` at step `step`.
///
/// Tensors larger than `max_coords` are checked on `max_coords` evenly
/// spaced coordinates.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    analytic: &Gradients,
    loss: F,
    step: f64,
    tolerance: f64,
    max_coords: usize,
) -> Result<FdReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let mut checks = Vec::new();
    for (name, grad) in analytic.iter() {
        let len = params.require(name)?.len();
        if grad.len() != len {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_check",
                detail: format!("{name}: {} gradient entries for {len} parameters", grad.len()),
            });
        }
        let count = len.min(max_coords.max(1));
        let mut check = ParamCheck {
            name: name.clone(),
            checked: count,
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for s in 0..count {
            let idx = s * len / count;
            let orig = params.require(name)?.values()[idx];
            work.get_mut(name).expect("cloned").values_mut()[idx] = orig + step;
            let up = loss(&work)?;
            work.get_mut(name).expect("cloned").values_mut()[idx] = orig - step;
            let down = loss(&work)?;
            work.get_mut(name).expect("cloned").values_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(grad.values()[idx], numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = err;
                check.worst_index = idx;
            }
        }
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(FdReport {
        passed: max_rel_error <= tolerance,
        max_rel_error,
        tolerance,
        params: checks,
    })
}
