//! Binding model parameters into a [`Graph`].

use std::collections::HashMap;
use std::marker::PhantomData;

use crate::autograd::{BackwardFault, Gradients, Graph, Var};
use crate::tensor::Tensor;

/// A graph plus a cache of bound parameters.
///
/// Parameters are identified by address, so a model borrowed for `'m`
/// binds each tensor at most once per session. A leaf requires a gradient
/// exactly when the bound tensor has `requires_grad` set.
pub struct Session<'m> {
    pub graph: Graph,
    bound: HashMap<usize, Var>,
    _models: PhantomData<&'m Tensor>,
}

impl<'m> Session<'m> {
    pub fn new() -> Self {
        Self::with_fault(None)
    }

    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Self {
            graph: Graph::with_fault(fault),
            bound: HashMap::new(),
            _models: PhantomData,
        }
    }

    pub fn param(&mut self, t: &'m Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.graph.leaf(t.detached(), t.requires_grad);
        self.bound.insert(key, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn bound_var(&self, t: &Tensor) -> Option<Var> {
        self.bound.get(&(t as *const Tensor as usize)).copied()
    }

    /// Gradient for a bound parameter; `None` if the tensor was never bound
    /// or does not require a gradient.
    pub fn grad_of(&self, grads: &Gradients, t: &Tensor) -> Option<Tensor> {
        if !t.requires_grad {
            return None;
        }
        let v = self.bound_var(t)?;
        Some(grads.get_or_zeros(v, t))
    }
}

impl Default for Session<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Something that owns named parameter tensors.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| {
            if t.requires_grad {
                n += t.len()
            }
        });
        n
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_params_mut(&mut |_, t| t.requires_grad = trainable);
    }

    /// Combined checksum of all parameter values, in visit order.
    fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        self.visit_params(&mut |name, t| {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&t.checksum().to_le_bytes());
        });
        crate::util::fnv1a64(&bytes)
    }
}
