//! Named parameter storage and per-forward-pass tape bindings.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Grads, Tape, Var};

/// All trainable arrays of a model, keyed by dotted path
/// (e.g. `main.enc.stem.w`, `peer.head.b`). BTreeMap keeps iteration
/// order stable so runs are reproducible.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate parameter {name}");
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    /// Total scalar count across all parameters, optionally restricted to a
    /// name prefix.
    pub fn num_params(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Stage every parameter onto a tape as a leaf, returning the bindings.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.map {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        Bound { vars }
    }
}

/// Name -> tape variable mapping for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Collect gradients for all bound parameters whose name starts with
    /// `prefix`. Parameters unreachable from the loss get zero gradients.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        grads: &Grads,
        prefix: &str,
    ) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if !name.starts_with(prefix) {
                continue;
            }
            let shape = tape.shape(*var).to_vec();
            out.insert(name.clone(), grads.get_or_zeros(*var, &shape));
        }
        out
    }
}
