//! Adam with a constant learning rate, scaled per parameter.

use crate::config::AdamConfig;
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from `(parameter, gradient)` pairs; parameters without a gradient are left alone.
    pub fn apply<'g>(&mut self, store: &mut ParamStore<T>, grads: impl IntoIterator<Item = (ParamId, &'g Tensor<T>)>)
    where
        T: 'g,
    {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let base = self.lr * c2.sqrt() / c1;
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let eps_hat = T::lit(eps * c2.sqrt());
        for (id, g) in grads {
            let step = T::lit(base * store.lr_scale(id));
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + ob1 * gk;
                v[k] = b2 * v[k] + ob2 * gk * gk;
                p[k] -= step * m[k] / (v[k].sqrt() + eps_hat);
            }
        }
    }
}
