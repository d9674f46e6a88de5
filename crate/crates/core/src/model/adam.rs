use std::collections::BTreeMap;

use crate::autodiff::{lit, ParamStore, Real, Tensor};

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore<F>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (lit::<F>(self.beta1), lit::<F>(self.beta2));
        let c1 = lit::<F>(1.0 - self.beta1.powi(t));
        let c2 = lit::<F>(1.0 - self.beta2.powi(t));
        let (lr, eps) = (lit::<F>(self.lr), lit::<F>(self.eps));
        for (name, p) in store.iter_mut() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let g = p.grad.data();
            for (((w, m), v), &g) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
