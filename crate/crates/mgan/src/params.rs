//! Named, ordered parameter storage. Order is fixed at construction and is
//! the canonical order for optimizer state, gradient clipping, checkpoints,
//! and gradient-check reports.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        debug_assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        self.entries.push((name.to_string(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        *self.get_mut(name) = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    /// Register every parameter on a tape as a differentiable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        BoundParams { set: self, ids }
    }

    /// Total entry count across all tensors.
    pub fn entry_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// A ParamSet registered on a tape: name -> leaf VarId lookup for forward
/// passes and gradient collection.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    ids: Vec<VarId>,
}

impl<'a> BoundParams<'a> {
    pub fn get(&self, name: &str) -> VarId {
        let i = self
            .set
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }

    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }

    pub fn set(&self) -> &'a ParamSet {
        self.set
    }

    /// Dense gradient tensors in parameter order (zeros where unreachable).
    pub fn collect_grads(&self, grads: &crate::tape::Gradients) -> Vec<Tensor> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| grads.dense(id, self.set.tensor_at(i).shape()))
            .collect()
    }
}

/// Copy every tensor whose name starts with one of the prefixes from `src`
/// into `dst`. Missing or shape-mismatched targets are errors.
pub fn copy_by_prefix(src: &ParamSet, dst: &mut ParamSet, prefixes: &[&str]) -> Result<()> {
    for (name, tensor) in src.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            match dst.index_of(name) {
                Some(i) => {
                    if dst.tensor_at(i).shape() != tensor.shape() {
                        return Err(Error::Validation(format!(
                            "copy_by_prefix: shape mismatch for {name}"
                        )));
                    }
                    *dst.tensor_at_mut(i) = tensor.clone();
                }
                None => {
                    return Err(Error::Validation(format!(
                        "copy_by_prefix: destination lacks {name}"
                    )))
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::scalar(1.0));
        p.insert("a", Tensor::scalar(2.0));
        assert_eq!(p.names(), vec!["b".to_string(), "a".to_string()]);
        assert_eq!(p.index_of("a"), Some(1));
    }

    #[test]
    fn bind_and_collect_round_trip() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![2.0, 3.0]));
        let mut tape = Tape::new();
        let bp = p.bind(&mut tape);
        let w = bp.get("w");
        let s = tape.sum_squares(w);
        let g = tape.backward(s).unwrap();
        let collected = bp.collect_grads(&g);
        assert_eq!(collected[0].data(), &[4.0, 6.0]);
    }

    #[test]
    fn copy_by_prefix_moves_matching_tensors() {
        let mut a = ParamSet::new();
        a.insert("enc.w", Tensor::vector(vec![1.0]));
        a.insert("head.w", Tensor::vector(vec![2.0]));
        let mut b = ParamSet::new();
        b.insert("enc.w", Tensor::vector(vec![0.0]));
        b.insert("head.w", Tensor::vector(vec![0.0]));
        copy_by_prefix(&a, &mut b, &["enc."]).unwrap();
        assert_eq!(b.get("enc.w").data(), &[1.0]);
        assert_eq!(b.get("head.w").data(), &[0.0]);
    }
}
