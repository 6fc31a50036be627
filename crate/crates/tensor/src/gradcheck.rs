//! Central finite-difference checks of parameter gradients.

use crate::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct FdSample {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdSample {
    /// `|a - n| / max(|a|, |n|)`, zero when both vanish.
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Perturbs entry `index` of `param` by `±eps` and differentiates `loss` numerically.
pub fn numeric_grad(
    store: &mut ParamStore<f64>,
    param: ParamId,
    index: usize,
    eps: f64,
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
) -> f64 {
    let orig = store.get(param).data()[index];
    store.get_mut(param).data_mut()[index] = orig + eps;
    let up = loss(store);
    store.get_mut(param).data_mut()[index] = orig - eps;
    let down = loss(store);
    store.get_mut(param).data_mut()[index] = orig;
    (up - down) / (2.0 * eps)
}

/// Indices of the `n` largest-magnitude entries of `grad`, largest first.
pub fn largest_entries(grad: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.len()).collect();
    idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Checks the `n` entries of `param` with the largest analytic gradient.
pub fn check_param(
    store: &mut ParamStore<f64>,
    param: ParamId,
    analytic: &[f64],
    n: usize,
    eps: f64,
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
) -> Vec<FdSample> {
    largest_entries(analytic, n)
        .into_iter()
        .map(|index| FdSample { param, index, analytic: analytic[index], numeric: numeric_grad(store, param, index, eps, loss) })
        .collect()
}
