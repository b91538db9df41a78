use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters are never touched by an optimizer step.
    pub frozen: bool,
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, tensor: tensor.with_trainable(true), frozen: false });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn entry(&self, idx: usize) -> &Param<T> {
        &self.entries[idx]
    }

    pub(crate) fn entry_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        self.position(name)
            .map(|i| self.entries[i].frozen)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let i = self.position(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.entries[i].frozen = frozen;
        Ok(())
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in self.entries.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.tensor.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), frozen: p.frozen })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Global L2 norm over the gradients of non-frozen parameters.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|p| !p.frozen)
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm <= max_norm || norm == 0.0 {
            return;
        }
        let scale = T::from_f64(max_norm / norm).unwrap();
        for p in self.entries.iter_mut().filter(|p| !p.frozen) {
            if let Some(g) = p.tensor.grad_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("b", Tensor::zeros(&[1])).unwrap();
        ps.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(ps.insert("a", Tensor::zeros(&[1])), Err(Error::DuplicateParam(_))));
        let names: Vec<_> = ps.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert!(ps.get("a").unwrap().trainable);
    }

    #[test]
    fn prefix_freezing() {
        let mut ps = ParamSet::<f32>::new();
        for n in ["app.stem.w", "app.head.w", "mem.w"] {
            ps.insert(n, Tensor::zeros(&[1])).unwrap();
        }
        ps.set_frozen_prefix("app.", true);
        ps.set_frozen("app.head.w", false).unwrap();
        assert!(ps.is_frozen("app.stem.w").unwrap());
        assert!(!ps.is_frozen("app.head.w").unwrap());
        assert!(!ps.is_frozen("mem.w").unwrap());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::zeros(&[2])).unwrap();
        ps.get_mut("w").unwrap().accumulate_grad(&[3.0, 4.0]).unwrap();
        assert!((ps.grad_norm() - 5.0).abs() < 1e-12);
        ps.clip_grad_norm(1.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);
    }
}
