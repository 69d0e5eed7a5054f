use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// A tape plus lazy binding of named parameters to leaves.
pub struct Graph<'a, F> {
    pub tape: Tape<F>,
    store: &'a ParamStore<F>,
    bound: HashMap<String, Var>,
}

impl<'a, F: Real> Graph<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Graph { tape: Tape::new(), store, bound: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    /// Leaf for the named parameter, bound once per graph.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.tape.param(name, value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }
}
