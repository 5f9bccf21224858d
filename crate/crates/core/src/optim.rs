//! Adam optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, value) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.first.entry(name.to_owned()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.to_owned()).or_insert_with(|| vec![0.0; g.len()]);
            for (k, x) in value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers and step count in checkpoint form, so training can resume exactly.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new(0);
        let vec_tensor = |v: &Vec<f64>| Tensor::new(vec![v.len()], v.clone()).expect("non-empty");
        s.insert("adam.step", Tensor::new(vec![1], vec![self.step as f64]).unwrap()).unwrap();
        s.insert("adam.lr", Tensor::new(vec![1], vec![self.lr]).unwrap()).unwrap();
        for (k, v) in &self.first {
            s.insert(format!("m.{k}"), vec_tensor(v)).unwrap();
        }
        for (k, v) in &self.second {
            s.insert(format!("v.{k}"), vec_tensor(v)).unwrap();
        }
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let scalar = |name: &str| {
            store.get(name).map(|t| t.data()[0]).ok_or_else(|| Error::Data(format!("optimizer state lacks {name}")))
        };
        let mut adam = Adam::new(scalar("adam.lr")?);
        adam.step = scalar("adam.step")? as u64;
        for (name, t) in store.iter() {
            if let Some(k) = name.strip_prefix("m.") {
                adam.first.insert(k.to_owned(), t.data().to_vec());
            } else if let Some(k) = name.strip_prefix("v.") {
                adam.second.insert(k.to_owned(), t.data().to_vec());
            }
        }
        Ok(adam)
    }
}
