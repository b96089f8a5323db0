//! Central finite-difference verification of recorded gradients.

use super::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};

/// Checks the tape gradients of a scalar computation against central finite
/// differences over every parameter entry.
///
/// Returns the maximum relative error
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`. The builder must be a
/// deterministic function of the store.
pub fn grad_check<F>(store: &mut ParamStore, build: F, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(store, &mut g)?;
    if g.value(loss).shape() != [1, 1] {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            left: g.value(loss).shape().to_vec(),
            right: vec![1, 1],
        });
    }
    g.backward(loss)?;
    let analytic = g.param_grads();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(store, &mut g)?;
        let v = g.value(loss).at(0, 0);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for name in store.names() {
        let len = store.get(&name)?.len();
        for i in 0..len {
            let base = store.get(&name)?.data()[i];
            store.set_entry(&name, i, base + eps)?;
            let f_plus = eval(store)?;
            store.set_entry(&name, i, base - eps)?;
            let f_minus = eval(store)?;
            store.set_entry(&name, i, base)?;
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let ad = analytic.get(&name).map_or(0.0, |g| g[i]);
            if !fd.is_finite() || !ad.is_finite() {
                return Err(Error::NonFinite("grad_check difference"));
            }
            let rel = (ad - fd).abs() / 1.0f64.max(ad.abs()).max(fd.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
