use super::{ParamGrads, ParamStore, Real, TensorError};

/// Gradients smaller than this are compared on an absolute scale.
const MAGNITUDE_FLOOR: Real = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// `|a − b| / max(|a|, |b|, floor)`
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// `(f(x + eps) − f(x − eps)) / 2eps`
pub fn central_difference(f: impl Fn(Real) -> Real, x: Real, eps: Real) -> Real {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Compares `analytic` against central finite differences of `loss` for every
/// parameter element. `loss` must be deterministic.
pub fn gradient_check<F>(
    params: &ParamStore,
    analytic: &ParamGrads,
    eps: Real,
    tol: Real,
    mut loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&ParamStore) -> Real,
{
    assert!(eps > 0.0, "eps must be positive");
    let base = loss(params);
    if !base.is_finite() {
        return Err(TensorError::NonFinite("gradient_check loss".into()));
    }
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = loss(&work);
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = loss(&work);
            work.get_mut(id).data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite(format!("{}[{k}]", params.name(id))));
            }
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic.get(id).data()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
