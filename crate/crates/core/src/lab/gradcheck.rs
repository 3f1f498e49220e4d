//! Analytic gradients checked against central finite differences.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::model::{loss, loss_and_grad, seeded, Grads, Sample, ToyModel};

/// Denominator floor for the relative error, so parameters whose true
/// gradient is (near) zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
/// Minimum number of parameters compared per check.
pub const MIN_PARAMS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Flat index (W1, b1, w2, b2 order) of the worst parameter.
    pub worst_param: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the model's backward pass with central differences of the mean
/// loss over `batch` on at least [`MIN_PARAMS`] parameters.
pub fn grad_check(model: &ToyModel, batch: &[Sample], eps: f64, n_params: usize, seed: u64) -> GradCheck {
    grad_check_with(model, batch, eps, n_params, seed, |m, b| loss_and_grad(m, b).1)
}

/// [`grad_check`] with a caller-supplied gradient function.
///
/// Half of the sampled parameters come from `W1` rows of features that occur
/// in the batch (the rest of `W1` has an exactly zero gradient); the other
/// half are drawn uniformly from all parameters.
pub fn grad_check_with(
    model: &ToyModel,
    batch: &[Sample],
    eps: f64,
    n_params: usize,
    seed: u64,
    grad_fn: impl Fn(&ToyModel, &[Sample]) -> Grads,
) -> GradCheck {
    assert!((1e-6..=1e-3).contains(&eps), "eps must lie in [1e-6, 1e-3]");
    let n = n_params.max(MIN_PARAMS);
    let h = model.shape.hidden;
    let mut rng = seeded(seed, 7);
    let mut active: Vec<usize> = batch.iter().flat_map(|s| s.x.entries.iter().map(|(i, _)| *i)).collect();
    active.sort_unstable();
    active.dedup();

    let mut params = Vec::with_capacity(n);
    for k in 0..n {
        let p = if k % 2 == 0 && !active.is_empty() {
            let row = *active.choose(&mut rng).expect("non-empty");
            row * h + rng.random_range(0..h)
        } else {
            rng.random_range(0..model.num_params())
        };
        params.push(p);
    }

    let grads = grad_fn(model, batch);
    let mut probe = model.clone();
    let mut worst = (0.0, 0);
    for &p in &params {
        let orig = probe.param(p);
        *probe.param_mut(p) = orig + eps;
        let up = loss(&probe, batch);
        *probe.param_mut(p) = orig - eps;
        let down = loss(&probe, batch);
        *probe.param_mut(p) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(grads.get(p), numeric);
        if err > worst.0 {
            worst = (err, p);
        }
    }
    GradCheck {
        max_relative_error: worst.0,
        worst_param: worst.1,
        checked: params.len(),
    }
}
