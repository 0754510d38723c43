//! Adaptive-moment optimizer.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Adam with bias correction. One instance per parameter group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update using `grads`; only parameters present in the grad
    /// map are touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = store.get_mut(name);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_first_step_has_unit_scale() {
        // With bias correction the very first step moves by ~lr * sign(g).
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[2]), 3.0));
        opt.step(&mut store, &grads);
        let w = store.get("w");
        for &x in w.iter() {
            assert!((x - (1.0 - 0.1)).abs() < 1e-6, "got {x}");
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let w = store.get("w").clone();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), w.mapv(|x| 2.0 * x));
            opt.step(&mut store, &grads);
        }
        assert!(store.get("w")[[0]].abs() < 1e-2);
    }
}
