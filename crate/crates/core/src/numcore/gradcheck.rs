//! Central finite differences, used as an independent gradient oracle.

use super::{Grads, ParamStore};

/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every scalar entry of every
/// parameter. `f` must be deterministic for a fixed store.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&ParamStore) -> Result<f64, E>,
    store: &ParamStore,
    h: f64,
) -> Result<Grads, E> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grads = Grads::zeros_like(store);
    let mut probe = store.clone();
    for id in store.ids() {
        for i in 0..store.get(id).values().len() {
            let orig = store.get(id).values()[i];
            probe.get_mut(id).values_mut()[i] = orig + h;
            let plus = f(&probe)?;
            probe.get_mut(id).values_mut()[i] = orig - h;
            let minus = f(&probe)?;
            probe.get_mut(id).values_mut()[i] = orig;
            grads.get_mut(id).values_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Largest entrywise discrepancy between two gradients of one parameter,
/// relative to the larger of their max-magnitudes (floored at `floor`).
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(floor, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
