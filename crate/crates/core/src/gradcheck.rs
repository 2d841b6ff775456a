//! Central finite-difference gradient verification.
//!
//! These helpers evaluate a forward-only loss closure at perturbed
//! parameter values; they never touch the recorded-graph backward pass, so
//! they can serve as an independent oracle for it.

use crate::optim::ParamStore;

/// Default perturbation for fp64 central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Central-difference gradient of `loss_fn` w.r.t. every parameter
/// coordinate: (f(p + h) - f(p - h)) / 2h.
pub fn central_gradients<F>(store: &ParamStore, mut loss_fn: F, h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for slot in 0..store.len() {
        let n = store.get(slot).tensor.numel();
        let mut grads = vec![0.0; n];
        for i in 0..n {
            let orig = work.get(slot).tensor.data()[i];
            work.get_mut(slot).tensor.data_mut()[i] = orig + h;
            let plus = loss_fn(&work);
            work.get_mut(slot).tensor.data_mut()[i] = orig - h;
            let minus = loss_fn(&work);
            work.get_mut(slot).tensor.data_mut()[i] = orig;
            grads[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grads);
    }
    out
}

/// Relative error with a small absolute floor so that near-zero pairs do
/// not blow up the ratio.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between the gradients stored on `store` (populated
/// by a backward pass) and central finite differences of `loss_fn`.
/// Returns the error and a `param[index]` label for the worst coordinate.
pub fn max_rel_error<F>(store: &ParamStore, loss_fn: F, h: f64) -> (f64, String)
where
    F: FnMut(&ParamStore) -> f64,
{
    let numeric = central_gradients(store, loss_fn, h);
    let mut worst = 0.0;
    let mut worst_at = String::from("<none>");
    for (slot, param) in store.iter().enumerate() {
        let analytic = param
            .tensor
            .grad
            .as_deref()
            .unwrap_or_else(|| panic!("parameter '{}' has no gradient to check", param.name));
        for (i, (&a, &f)) in analytic.iter().zip(&numeric[slot]).enumerate() {
            let e = rel_error(a, f);
            if e > worst {
                worst = e;
                worst_at = format!("{}[{}]", param.name, i);
            }
        }
    }
    (worst, worst_at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::optim::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn finite_differences_recover_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("w", vec![3], Init::Normal { std: 1.0 }, &mut rng);
        // loss = sum(w^2), gradient 2w
        let fd = central_gradients(&store, |s| s.get(0).tensor.data().iter().map(|v| v * v).sum(), 1e-5);
        for (g, w) in fd[0].iter().zip(store.get(0).tensor.data()) {
            assert!(rel_error(*g, 2.0 * w) < 1e-8);
        }
    }

    #[test]
    fn oracle_agrees_with_backward_on_a_small_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = store.add("w", vec![2, 2], Init::Normal { std: 0.8 }, &mut rng);
        let b = store.add("b", vec![2], Init::Normal { std: 0.5 }, &mut rng);
        let forward = |s: &ParamStore| -> f64 {
            let mut g = Graph::from_params(s);
            let x = g.constant(vec![2, 2], vec![0.7, -1.3, 0.2, 2.4]).unwrap();
            let y = g.matmul(x, w).unwrap();
            let y = g.add_bias(y, b).unwrap();
            let y = g.relu(y);
            let sm = g.softmax_lastdim(y);
            let s1 = g.sum_all(sm);
            let sq = g.mul(s1, s1).unwrap();
            g.scalar_value(sq)
        };
        let mut g = Graph::from_params(&store);
        let x = g.constant(vec![2, 2], vec![0.7, -1.3, 0.2, 2.4]).unwrap();
        let y = g.matmul(x, w).unwrap();
        let y = g.add_bias(y, b).unwrap();
        let y = g.relu(y);
        let sm = g.softmax_lastdim(y);
        let s1 = g.sum_all(sm);
        let sq = g.mul(s1, s1).unwrap();
        g.backward(sq).unwrap();
        g.accumulate_param_grads(&mut store);
        let (err, at) = max_rel_error(&store, forward, DEFAULT_H);
        assert!(err < 1e-6, "max rel err {err} at {at}");
    }
}
