use super::optim::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero compare on absolute error instead of dividing by ~0.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// Compares the gradients stored in `store` against central finite
/// differences of `f` at every scalar coordinate.
pub fn gradient_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let coords = store.coordinates();
    gradient_check_at(store, &coords, h, f)
}

/// Finite-difference check restricted to the given `(parameter, flat index)`
/// coordinates. Returns the maximum relative error.
pub fn gradient_check_at<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut worst: f64 = 0.0;
    for &(id, index) in coords {
        let analytic = store.grad(id).data()[index];
        let original = store.value(id).data()[index];

        store.value_mut(id).data_mut()[index] = original + h;
        let plus = f(store)?;
        store.value_mut(id).data_mut()[index] = original - h;
        let minus = f(store)?;
        store.value_mut(id).data_mut()[index] = original;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective near coordinate {index} of parameter {:?}",
                id
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
