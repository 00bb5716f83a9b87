//! Named parameter collections and their tape bindings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// A named set of trainable tensors. Iteration order is the sorted name
/// order, which keeps reductions over parameters deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Register every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.entries {
            vars.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        Bound { vars }
    }
}

/// Parameter-name to tape-variable mapping for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collect gradients per parameter after a backward pass. Parameters the
    /// loss never touched get an explicit zero gradient of matching shape.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        grads: &crate::autodiff::tape::Gradients,
    ) -> GradSet {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            let g = match grads.get(var) {
                Some(t) => t.clone(),
                None => {
                    let (r, c) = tape.value(var).shape();
                    Tensor::zeros(r, c)
                }
            };
            out.insert(name.clone(), g);
        }
        GradSet { entries: out }
    }
}

/// How a parameter tensor is filled at initialization time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Symmetric uniform scaled by 1/sqrt(fan_in); fan_in = rows.
    UniformFanIn,
    /// All zeros (scaling coefficients, biases, mixture logits).
    Zero,
}

/// Declarative shape+init description of one parameter.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: InitKind,
}

impl ParamSpec {
    pub fn uniform(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init: InitKind::UniformFanIn,
        }
    }

    pub fn zero(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init: InitKind::Zero,
        }
    }
}

/// Gradients keyed by parameter name, shapes mirroring the `ParamSet`.
#[derive(Debug, Clone, Default)]
pub struct GradSet {
    entries: BTreeMap<String, Tensor>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    /// Global L2 norm over every gradient entry, in sorted name order.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(Tensor::frobenius_norm_sq)
            .sum::<f64>()
            .sqrt()
    }
}
