//! Named parameter storage shared between model modules, the optimizer, and
//! checkpointing. Values live behind `Arc<RwLock>` so forward passes on worker
//! threads read a consistent snapshot while the training loop holds the only
//! writer.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use ndarray::ArrayD;

use super::tensor::{Elem, Tensor};

#[derive(Clone)]
pub struct Param<F: Elem> {
    name: String,
    value: Arc<RwLock<ArrayD<F>>>,
}

impl<F: Elem> Param<F> {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Leaf tensor snapshotting the current value, tagged with the parameter
    /// name so backward() can route the gradient.
    pub fn leaf(&self) -> Tensor<F> {
        Tensor::named(self.value.read().unwrap().clone(), self.name.clone())
    }

    pub fn get(&self) -> ArrayD<F> {
        self.value.read().unwrap().clone()
    }

    pub fn set(&self, a: ArrayD<F>) {
        let mut v = self.value.write().unwrap();
        assert_eq!(v.shape(), a.shape(), "param {} shape change", self.name);
        *v = a;
    }

    pub fn update<G: FnOnce(&mut ArrayD<F>)>(&self, f: G) {
        f(&mut self.value.write().unwrap());
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.read().unwrap().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Registry of all trainable parameters, in registration order.
pub struct ParamStore<F: Elem> {
    entries: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Elem> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<F>) -> Param<F> {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let p = Param { name: name.to_string(), value: Arc::new(RwLock::new(value)) };
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|p| p.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.len()).sum()
    }
}
