use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// A parameter of one particular [`ParamStore`].
///
/// Ids remember their store, so gradients from a graph that binds several
/// stores are routed back to the right one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Named, ordered collection of tensors owned by one model component.
///
/// A clone keeps the store identity, so it can stand in for the original
/// (for example as a restored snapshot).
#[derive(Clone, Debug)]
pub struct ParamStore {
    store: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Equal when names and tensors match, regardless of store identity.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            store: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn pid(&self, index: usize) -> ParamId {
        ParamId {
            store: self.store,
            index,
        }
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.store, "parameter id from another store");
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.pid(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        self.check(id);
        &self.tensors[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.check(id);
        &mut self.tensors[id.index]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.check(id);
        &self.names[id.index]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| self.pid(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (self.pid(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Stores the gradients of a backward pass on the matching tensors.
    ///
    /// Every trainable parameter gets a gradient buffer; parameters the loss
    /// did not reach get zeros. Multiple bindings of one parameter are summed
    /// and gradients belonging to other stores are ignored.
    pub fn absorb(&mut self, grads: &Gradients) -> Result<()> {
        for t in self.tensors.iter_mut() {
            if t.requires_grad() {
                let n = t.numel();
                t.set_grad(vec![0.0; n])?;
            }
        }
        for (id, g) in grads.params() {
            if id.store != self.store {
                continue;
            }
            let t = self
                .tensors
                .get_mut(id.index)
                .ok_or_else(|| TensorError::Contract(format!("unknown parameter {}", id.index)))?;
            if !t.requires_grad() {
                continue;
            }
            let mut sum = t.grad().expect("initialised above").to_vec();
            if sum.len() != g.len() {
                return Err(TensorError::dim("absorb", sum.len(), g.len()));
            }
            sum.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            t.set_grad(sum)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn gradients_route_to_their_own_store() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let ia = a.insert("w", Tensor::scalar(2.0).with_grad());
        let ib = b.insert("w", Tensor::scalar(5.0).with_grad());
        let mut g = Graph::new();
        let va = g.param(&a, ia);
        let vb = g.param(&b, ib);
        let va3 = g.scale(va, 3.0).unwrap();
        let y = g.add(va3, vb).unwrap();
        let grads = g.backward(y).unwrap();
        a.absorb(&grads).unwrap();
        b.absorb(&grads).unwrap();
        assert_eq!(a.get(ia).grad().unwrap(), &[3.0]);
        assert_eq!(b.get(ib).grad().unwrap(), &[1.0]);
    }
}
