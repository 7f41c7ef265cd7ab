//! Gradient-descent optimizer with adaptive moment estimates (Adam) and L2
//! weight decay applied as a gradient term.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::param::ParamStore;
use super::tensor::Elem;

pub struct Adam<F: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<String, ArrayD<F>>,
    v: HashMap<String, ArrayD<F>>,
}

impl<F: Elem> Adam<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore<F>, grads: &HashMap<String, ArrayD<F>>) {
        self.t += 1;
        let b1 = F::c(self.beta1);
        let b2 = F::c(self.beta2);
        let one = F::one();
        let bc1 = F::c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::c(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::c(self.lr);
        let eps = F::c(self.eps);
        let wd = F::c(self.weight_decay);
        for p in store.iter() {
            let Some(g) = grads.get(p.name()) else { continue };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                let w = p.get();
                g = &g + &w.mapv(|x| x * wd);
            }
            let m = self
                .m
                .entry(p.name().to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *m = m.mapv(|x| x * b1) + g.mapv(|x| x * (one - b1));
            let v = self
                .v
                .entry(p.name().to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v = v.mapv(|x| x * b2) + g.mapv(|x| x * x * (one - b2));
            let mhat = m.mapv(|x| x / bc1);
            let vhat = v.mapv(|x| x / bc2);
            p.update(|w| {
                ndarray::Zip::from(&mut *w).and(&mhat).and(&vhat).for_each(|w, &m, &v| {
                    *w = *w - lr * m / (v.sqrt() + eps);
                });
            });
        }
    }
}
