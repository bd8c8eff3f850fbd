//! Finite-difference verification of analytic gradients.

use super::ParamStore;

/// Compare the gradient accumulators currently held in `store` against
/// central finite differences of `loss` over every parameter. The loss
/// closure must be deterministic (dropout disabled) and must not mutate
/// the store's parameters.
///
/// Returns the max over parameters of |g_a − g_fd| / max(|g_a|, |g_fd|, 1e−8).
pub fn grad_check<F>(store: &mut ParamStore, mut loss: F, eps: f64) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut max_rel = 0.0f64;
    for li in 0..store.layers.len() {
        let nw = store.layers[li].w.data.len();
        let nb = store.layers[li].b.len();
        for pi in 0..nw + nb {
            let orig = if pi < nw {
                store.layers[li].w.data[pi]
            } else {
                store.layers[li].b[pi - nw]
            };
            let set = |store: &mut ParamStore, v: f64| {
                if pi < nw {
                    store.layers[li].w.data[pi] = v;
                } else {
                    store.layers[li].b[pi - nw] = v;
                }
            };
            set(store, orig + eps);
            let lp = loss(store);
            set(store, orig - eps);
            let lm = loss(store);
            set(store, orig);
            let g_fd = (lp - lm) / (2.0 * eps);
            let g_a = if pi < nw {
                store.layers[li].gw.data[pi]
            } else {
                store.layers[li].gb[pi - nw]
            };
            let rel = (g_a - g_fd).abs() / g_a.abs().max(g_fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
