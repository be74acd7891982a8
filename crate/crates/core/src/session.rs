//! Named parameter storage and the per-forward binding of parameters to a tape.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    /// Whether weight decay applies during optimization.
    pub decay: bool,
}

/// Parameters in a fixed order with name lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool, decay: bool) -> usize {
        let name = name.into();
        let idx = self.params.len();
        assert!(self.index.insert(name.clone(), idx).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable, decay });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Param<T>> {
        self.find(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn set_trainable(&mut self, name: &str, on: bool) -> Result<()> {
        let i = self
            .find(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        self.params[i].trainable = on;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for p in &mut self.params {
            p.trainable = on;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

/// Which model component a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Backbone,
    Peft,
    Head,
}

/// One forward pass: a tape plus the parameters bound onto it.
///
/// In inference mode every parameter is bound as a constant so no
/// gradient bookkeeping happens.
#[derive(Debug)]
pub struct Session<T> {
    pub tape: Tape<T>,
    bound: HashMap<(Owner, usize), Var>,
    inference: bool,
}

impl<T: Float> Session<T> {
    pub fn training() -> Self {
        Session { tape: Tape::new(), bound: HashMap::new(), inference: false }
    }

    pub fn inference() -> Self {
        Session { tape: Tape::new(), bound: HashMap::new(), inference: true }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    /// Leaf for `store[idx]`, created on first use.
    pub fn bind(&mut self, owner: Owner, idx: usize, store: &ParamStore<T>) -> Var {
        if let Some(&v) = self.bound.get(&(owner, idx)) {
            return v;
        }
        let p = store.get(idx);
        let v = self.tape.leaf(p.value.clone(), p.trainable && !self.inference);
        self.bound.insert((owner, idx), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Runs backward from `root` and drains gradients of every bound trainable parameter.
    pub fn backward(&mut self, root: Var) -> Result<Grads<T>> {
        self.tape.backward(root)?;
        let mut grads = Grads::default();
        for (&key, &v) in &self.bound {
            if let Some(g) = self.tape.take_grad(v) {
                grads.map.insert(key, g);
            }
        }
        Ok(grads)
    }
}

/// Gradients keyed by parameter, in deterministic key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads<T> {
    map: BTreeMap<(Owner, usize), Vec<T>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, owner: Owner, idx: usize) -> Option<&[T]> {
        self.map.get(&(owner, idx)).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (Owner, usize)> + '_ {
        self.map.keys().copied()
    }

    /// Elementwise accumulation of another sample's gradients.
    pub fn accumulate(&mut self, other: Grads<T>) {
        for (k, g) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => {
                    self.map.insert(k, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }
}
