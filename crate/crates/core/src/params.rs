//! Named parameter storage shared by the networks, the optimizer and checkpoints.

use std::collections::HashMap;

use crate::error::{MsgcError, Result};

/// Which optimizer group a tensor belongs to. Buffers are state, never optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Backbone,
    Gate,
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        dims: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(MsgcError::config(format!("duplicate parameter name `{name}`")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(MsgcError::shape(format!(
                "parameter `{name}` dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(Param { name, kind, dims, data });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over tensors of the given kind.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.params.iter().filter(|p| p.kind == kind).map(|p| p.data.len()).sum()
    }
}

/// Gradient buffers indexed like a [`ParamStore`]; accumulation is summation.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { data: store.params.iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let slot = &mut self.data[id.0];
        assert_eq!(slot.len(), grad.len(), "gradient shape differs from its parameter");
        for (a, b) in slot.iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_bad_dims() {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Backbone, vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(s.add("a", ParamKind::Gate, vec![1], vec![0.0]).is_err());
        assert!(s.add("b", ParamKind::Gate, vec![3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn grads_accumulate_by_summation() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Backbone, vec![3], vec![1.0; 3]).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.accumulate(id, &[1.0, 2.0, 3.0]);
        g.accumulate(id, &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(id), &[2.0, 3.0, 4.0]);
        g.zero();
        assert_eq!(g.get(id), &[0.0; 3]);
    }
}
