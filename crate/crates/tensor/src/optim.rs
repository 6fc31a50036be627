//! AdamW with decoupled weight decay.

use crate::graph::Gradients;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    state: Vec<Option<MomentState<T>>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: Vec::new() }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let mut ids: Vec<(ParamId, &Tensor<T>)> = grads.params().collect();
        ids.sort_by_key(|(id, _)| *id);
        for (id, grad) in ids {
            let p = store.get_mut(id);
            let st = self.state[id.index()].get_or_insert_with(|| MomentState {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let (b1, b2) = (T::of(beta1), T::of(beta2));
            let decay = T::of(1.0 - lr * weight_decay);
            let step_size = T::of(lr / bc1);
            let bc2_sqrt = T::of(bc2.sqrt());
            let eps = T::of(eps);
            let pd = p.data_mut();
            let (md, vd) = (st.m.data_mut(), st.v.data_mut());
            for i in 0..pd.len() {
                let g = grad.data()[i];
                pd[i] *= decay;
                md[i] = b1 * md[i] + (T::one() - b1) * g;
                vd[i] = b2 * vd[i] + (T::one() - b2) * g * g;
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                pd[i] -= step_size * md[i] / denom;
            }
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&MomentState<T>> {
        self.state.get(id.index()).and_then(Option::as_ref)
    }

    pub fn set_state(&mut self, id: ParamId, state: MomentState<T>) {
        if self.state.len() <= id.index() {
            self.state.resize(id.index() + 1, None);
        }
        self.state[id.index()] = Some(state);
    }
}
