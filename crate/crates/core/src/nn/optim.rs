//! Parameter-store optimizers: plain SGD (default) and Adam.

use super::store::{Grads, ParamStore};
use ndarray::ArrayD;

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        for i in 0..store.len() {
            if let Some(g) = grads.get(super::store::ParamId(i)) {
                store
                    .get_mut(super::store::ParamId(i))
                    .zip_mut_with(g, |p, &gv| *p -= self.lr * gv);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let id = super::store::ParamId(i);
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// Either optimizer, selected by config.
#[derive(Debug, Clone)]
pub enum AnyOptimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl AnyOptimizer {
    pub fn from_kind(kind: &str, lr: f64) -> Option<Self> {
        match kind {
            "sgd" => Some(AnyOptimizer::Sgd(Sgd::new(lr))),
            "adam" => Some(AnyOptimizer::Adam(Adam::new(lr))),
            _ => None,
        }
    }
}

impl Optimizer for AnyOptimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        match self {
            AnyOptimizer::Sgd(o) => o.step(store, grads),
            AnyOptimizer::Adam(o) => o.step(store, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn sgd_descends_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Sgd::new(0.1);
        for _ in 0..100 {
            let x = store.get(id)[[0]];
            let mut g = Grads::zeros_for(&store);
            g.accumulate(id, ArrayD::from_elem(IxDyn(&[1]), 2.0 * x));
            opt.step(&mut store, &g);
        }
        assert!(store.get(id)[[0]].abs() < 1e-6);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Adam::new(0.2);
        for _ in 0..400 {
            let x = store.get(id)[[0]];
            let mut g = Grads::zeros_for(&store);
            g.accumulate(id, ArrayD::from_elem(IxDyn(&[1]), 2.0 * x));
            opt.step(&mut store, &g);
        }
        assert!(store.get(id)[[0]].abs() < 1e-3);
    }
}
