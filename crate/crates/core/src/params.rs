//! Named parameter storage and the per-forward-pass binding of parameters to
//! graph leaves.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, NdArray, SeededRng, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<NdArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(NdArray::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`,
    /// requiring identical names and shapes.
    pub fn load_from(&mut self, other: &[(String, NdArray)]) -> Result<()> {
        if other.len() != self.tensors.len() {
            return Err(Error::Version(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Version(format!("unexpected parameter `{name}`")))?;
            if self.tensors[id.0].shape() != value.shape() {
                return Err(Error::Version(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = value.clone();
        }
        Ok(())
    }
}

/// Glorot-uniform initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut SeededRng, shape: &[usize]) -> NdArray {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        _ => (1, 1),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-limit, limit)).collect())
        .expect("consistent shape")
}

/// A forward pass: one graph plus lazily created leaves for the parameters
/// it touches.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// `trainable` sessions record gradients for parameters; inference
    /// sessions bind parameters as constants.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph leaf holding parameter `id`.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.g.param(value)
        } else {
            self.g.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient for every parameter, `None` where it was not used.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<NdArray>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = SeededRng::new(1);
        let w = glorot(&mut rng, &[4, 2]);
        let limit = 1.0f64;
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert_eq!(w.shape(), &[4, 2]);
    }

    #[test]
    fn session_binds_once() {
        let mut store = ParamStore::new();
        let id = store.add("w", NdArray::vector(vec![1.0, 2.0]));
        let mut s = Session::new(&store, true);
        let a = s.p(id);
        let b = s.p(id);
        assert_eq!(a, b);
        let sum = s.g.sum(a);
        let grads = s.g.backward(sum).unwrap();
        let pg = s.param_grads(&grads);
        assert_eq!(pg[0].as_ref().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("w", NdArray::zeros(&[2]));
        let err = store.load_from(&[("w".into(), NdArray::zeros(&[3]))]);
        assert!(matches!(err, Err(Error::Version(_))));
    }
}
