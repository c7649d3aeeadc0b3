//! Ordered, named parameter tensors and their per-tape bindings.

use std::collections::HashMap;
use std::sync::Arc;

use vfiqa_tensor::{Element, Gradients, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: Arc::default() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        Arc::make_mut(&mut self.index).insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`, trainable or not.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound<T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(trainable)))
            .collect();
        Bound { vars, index: Arc::clone(&self.index) }
    }

    /// Adds the gradients of a backward pass to the stored tensors.
    pub fn accumulate(&mut self, bound: &Bound<T>, grads: &Gradients<T>) -> Result<()> {
        for (tensor, var) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(var) {
                tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Sets a zero gradient on every parameter that has none, so parameters
    /// the batch never reached still take a (decay-only) optimizer step.
    pub fn fill_missing_grads(&mut self) -> Result<()> {
        for t in &mut self.tensors {
            if t.grad().is_none() {
                let zeros = vec![T::zero(); t.numel()];
                t.accumulate_grad(&zeros)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Parameters placed on one tape, looked up by name.
pub struct Bound<T: Element> {
    vars: Vec<Var<T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Element> Bound<T> {
    pub fn var(&self, name: &str) -> Result<&Var<T>> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_insertion_order_and_rejects_duplicates() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::zeros([2])).unwrap();
        s.insert("a", Tensor::zeros([3])).unwrap();
        assert!(s.insert("a", Tensor::zeros([1])).is_err());
        let names: Vec<_> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(s.numel(), 5);
    }

    #[test]
    fn gradients_flow_back_into_the_store() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        s.insert("unused", Tensor::zeros([1])).unwrap();
        let tape = Tape::new();
        let bound = s.bind(&tape, true);
        let w = bound.var("w").unwrap().clone();
        let loss = tape.sum(&tape.mul(&w, &w).unwrap());
        let grads = tape.backward(&loss).unwrap();
        s.accumulate(&bound, &grads).unwrap();
        assert_eq!(s.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
        assert!(s.get("unused").unwrap().grad().is_none());
        s.fill_missing_grads().unwrap();
        assert_eq!(s.get("unused").unwrap().grad().unwrap(), &[0.0]);
        assert!(bound.var("nope").is_err());
    }
}
