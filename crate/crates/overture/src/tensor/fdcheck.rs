//! Central-difference gradient verification.
//!
//! Meaningful only at `f64`; `f32` rounding swamps the differences.

use super::params::ParamStore;
use super::{Scalar, Tensor};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FdParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub per_param: Vec<FdParamReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdParamReport> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare the analytic gradients already accumulated in `params` against
/// central finite differences of `loss_fn`.
///
/// Relative error per element is
/// `|g_analytic - g_fd| / max(|g_analytic|, |g_fd|, 1e-8)`; a parameter
/// passes iff its max over elements is at most `tol`.
pub fn finite_diff_check<T, F>(
    params: &mut ParamStore<T>,
    mut loss_fn: F,
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<Tensor<T>>,
{
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall = 0.0f64;
    for idx in 0..params.len() {
        let name = params.name_at(idx).to_string();
        let numel = params.value_at(idx).numel();
        let mut max_rel = 0.0f64;
        for j in 0..numel {
            let orig = params.value_at(idx).data()[j];
            let step = T::from_f64(h);

            params.value_at_mut(idx).data_mut()[j] = orig + step;
            let plus = loss_fn(params)?.scalar_value().as_f64();
            params.value_at_mut(idx).data_mut()[j] = orig - step;
            let minus = loss_fn(params)?.scalar_value().as_f64();
            params.value_at_mut(idx).data_mut()[j] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing parameter {name}[{j}]"
                )));
            }
            let fd = (plus - minus) / (2.0 * h);
            let analytic = params.grad_at(idx).data()[j].as_f64();
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            let rel = (analytic - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
        if max_rel > overall {
            overall = max_rel;
        }
        per_param.push(FdParamReport {
            name,
            max_rel_err: max_rel,
            passed: max_rel <= tol,
        });
    }
    Ok(FdReport {
        per_param,
        max_rel_err: overall,
        tol,
        passed: overall <= tol,
    })
}
