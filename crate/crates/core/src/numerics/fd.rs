//! Central finite differences, used as an independent check on `Graph::backward`.

use super::{NumericsError, ParamId, ParamStore};

/// Below this magnitude gradients are compared absolutely: a central difference
/// with `h = 1e-5` on an O(1) loss carries roughly 1e-10 of round-off.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn finite(v: f64) -> Result<f64, NumericsError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumericsError::NonFinite(v))
    }
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate of `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(NumericsError::Contract("step size must be positive".into()));
    }
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = finite(f(&p))?;
        p[i] = orig - h;
        let fm = finite(f(&p))?;
        p[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient of a loss over selected parameter coordinates.
///
/// `coords` lists `(parameter, flat index)` pairs. Parameter values are restored
/// after each probe.
pub fn finite_difference_gradient<F>(
    mut f: F,
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&ParamStore) -> Result<f64, NumericsError>,
{
    if h <= 0.0 {
        return Err(NumericsError::Contract("step size must be positive".into()));
    }
    let mut out = Vec::with_capacity(coords.len());
    for &(id, k) in coords {
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + h;
        let fp = f(store).and_then(finite);
        store.value_mut(id).data_mut()[k] = orig - h;
        let fm = f(store).and_then(finite);
        store.value_mut(id).data_mut()[k] = orig;
        out.push((fp? - fm?) / (2.0 * h));
    }
    Ok(out)
}
