use crate::{Gradients, ParamStore, Real};
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay, bound to one [`ParamStore`].
///
/// Parameters absent from the supplied gradients are left untouched and do
/// not advance their moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    config: AdamWConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    steps: Vec<u64>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |a: &ArrayD<T>| ArrayD::zeros(a.raw_dim());
        Self {
            config,
            m: store.iter().map(|(_, a)| zeros(a)).collect(),
            v: store.iter().map(|(_, a)| zeros(a)).collect(),
            steps: vec![0; store.len()],
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Applies one update with learning rate `lr`. Returns the number of
    /// parameter tensors that were updated.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> usize {
        let c = self.config;
        let mut touched = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
            let one = T::one();
            let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
            let step = T::from_f64_lossy(lr / bc1);
            let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
            let eps = T::from_f64_lossy(c.eps);
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p *= decay;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
                });
            touched += 1;
        }
        touched
    }
}
