use std::collections::HashMap;

use crate::autodiff::{Tape, Tensor, Var};

/// Ordered registry of every learnable tensor, keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` as trainable. Panics on a duplicate name: registry
    /// layout is fixed by code, so a clash is a programming error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.names.contains(&name), "parameter {name} registered twice");
        self.names.push(name);
        self.values.push(value.with_grad());
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Binds every parameter as a leaf of `tape`, in registry order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        self.bind_vars(self.values.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Uses caller-provided variables (one per parameter, registry order) in
    /// place of the stored values.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> BoundParams<'t> {
        assert_eq!(vars.len(), self.len(), "one variable per registered parameter");
        BoundParams {
            vars,
            index: self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }
}

/// Parameters bound to one tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    /// Panics if `name` is not registered; the model only asks for names it
    /// registered itself.
    pub fn get(&self, name: &str) -> Var<'t> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not registered"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients after `backward`, in registry order; `None` for parameters
    /// the loss never reached.
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}
