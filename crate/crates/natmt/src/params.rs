//! Named parameter storage shared by all models.

use indexmap::IndexMap;

use crate::error::ModelError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered map of named tensors. Iteration order is insertion order, which
/// keeps optimizer traversal and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.entries
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.iter_mut() {
            t.zero_grad();
        }
    }
}

/// Tape bindings for one forward/backward pass: every parameter becomes a
/// leaf, and gradients flow back into the [`ParamSet`] afterwards.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Record every parameter as a tape leaf.
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut vars = IndexMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), tape.leaf_from(t));
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    /// Copy tape gradients back into the parameter tensors (accumulating).
    pub fn collect_grads(&self, tape: &Tape, params: &mut ParamSet) -> Result<(), ModelError> {
        for (name, var) in &self.vars {
            if let Some(g) = tape.grad(*var) {
                params.get_mut(name)?.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_roundtrip() {
        let mut params = ParamSet::new();
        params.insert(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad(),
        );
        params.insert("frozen", Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let w = bound.var("w").unwrap();
        let s = tape.sum_all(w);
        tape.backward(s).unwrap();
        bound.collect_grads(&tape, &mut params).unwrap();

        assert_eq!(params.get("w").unwrap().grad().unwrap(), &[1.0; 4]);
        assert!(params.get("frozen").unwrap().grad().is_none());
        assert!(bound.var("nope").is_err());
    }
}
