//! Central finite-difference checks of analytic gradients.

use crate::error::Result;
use crate::numerics::ParamStore;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference gradient of `f` with respect to every scalar in `params`.
///
/// Values are restored bit-for-bit after each probe.
pub fn numeric_gradient<F>(params: &mut ParamStore, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut out = Vec::with_capacity(params.numel());
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + FD_EPS;
            let plus = f(params)?;
            params.value_mut(id).data_mut()[j] = orig - FD_EPS;
            let minus = f(params)?;
            params.value_mut(id).data_mut()[j] = orig;
            out.push((plus - minus) / (2.0 * FD_EPS));
        }
    }
    Ok(out)
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares the gradient that `loss_and_grad` accumulates into `params` against
/// central differences of `loss`.
pub fn check_gradients<F, G>(params: &mut ParamStore, mut loss: F, mut loss_and_grad: G) -> Result<GradCheck>
where
    F: FnMut(&ParamStore) -> Result<f64>,
    G: FnMut(&mut ParamStore) -> Result<()>,
{
    params.zero_grad();
    loss_and_grad(params)?;
    let analytic = params.flat_grads();
    params.zero_grad();
    let numeric = numeric_gradient(params, &mut loss)?;
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
