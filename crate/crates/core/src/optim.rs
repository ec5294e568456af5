//! Adaptive moment estimation over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    step: i32,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Apply one update to every parameter that has a gradient. Parameters
    /// absent from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2): (T, T) = (lit(self.cfg.beta1), lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let lr: T = lit(self.cfg.lr);
        let eps: T = lit(self.cfg.eps);
        for (name, g) in &grads.map {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
