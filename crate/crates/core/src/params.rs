//! Trainable parameters and their gradients.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A tensor registered for gradient accumulation.
///
/// A frozen parameter is handed to tapes as a constant, so it never collects
/// gradient, and the optimizer skips it.
#[derive(Debug, Clone)]
pub struct Parameter<T: Float> {
    pub name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    frozen: bool,
}

impl<T: Float> Parameter<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float> {
    params: Vec<Parameter<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    /// Replace a parameter's value. Rejected (returns `false`) for frozen
    /// parameters or on a shape change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> bool {
        let p = &mut self.params[id.0];
        if p.frozen || p.value.shape() != value.shape() {
            return false;
        }
        p.value = value;
        true
    }

    /// Mutable access to the raw value of a trainable parameter.
    pub fn value_mut(&mut self, id: ParamId) -> Option<&mut [T]> {
        let p = &mut self.params[id.0];
        if p.frozen {
            None
        } else {
            Some(p.value.data_mut())
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        if frozen {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register `id` on `tape`; frozen parameters come through as constants.
    pub fn var<'t>(&self, tape: &'t Tape<T>, id: ParamId) -> Var<'t, T> {
        let p = &self.params[id.0];
        tape.param_leaf(id, &p.value, !p.frozen)
    }

    /// Parameter value as a constant, blocking gradient for this use only.
    pub fn detached<'t>(&self, tape: &'t Tape<T>, id: ParamId) -> Var<'t, T> {
        tape.constant(self.params[id.0].value.clone())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// `grad += scale * g` for every trainable parameter present in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    /// Direct access used by optimizers: `(value, grad)` of a trainable parameter.
    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> Option<(&mut [T], &[T])> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return None;
        }
        Some((p.value.data_mut(), p.grad.data()))
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut [T]> {
        let p = &mut self.params[id.0];
        if p.frozen {
            None
        } else {
            Some(p.grad.data_mut())
        }
    }

    /// Cast every parameter to another float type, keeping names and freeze flags.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let p = ps.add("p", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let tape = Tape::new();
        let loss = ps.var(&tape, p).sum_all();
        let g = tape.backward(loss).unwrap();
        ps.accumulate(&g, 1.0);
        assert_eq!(ps.get(p).grad().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let p = ps.add("p", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let tape = Tape::new();
        let v = ps.var(&tape, p);
        let loss = v.mul(v).unwrap().sum_all();
        ps.accumulate(&tape.backward(loss).unwrap(), 1.0);
        assert_eq!(ps.get(p).grad().data(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_parameter_keeps_zero_grad_and_value() {
        let mut ps = ParamStore::<f64>::new();
        let p = ps.add("p", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let q = ps.add("q", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        ps.set_frozen(p, true);
        let tape = Tape::new();
        let loss = ps.var(&tape, p).mul(ps.var(&tape, q)).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert!(g.param(p).is_none());
        ps.accumulate(&g, 1.0);
        assert_eq!(ps.get(p).grad().data(), &[0.0, 0.0]);
        assert_eq!(ps.get(q).grad().data(), &[1.0, 2.0]);
        assert!(!ps.set_value(p, Tensor::zeros(&[2])));
        assert!(ps.value_mut(p).is_none());
        assert_eq!(ps.value(p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_parameter_accumulates_once_per_use() {
        let mut ps = ParamStore::<f64>::new();
        let p = ps.add("p", Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let tape = Tape::new();
        let a = ps.var(&tape, p);
        let b = ps.var(&tape, p);
        assert_eq!(a.id(), b.id());
        let loss = a.add(b).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(p).unwrap().data(), &[2.0]);
    }
}
