//! Named parameter storage and per-pass binding onto a tape.
//!
//! Models do not own their weights; they address entries of a
//! [`ParamStore`] by name ("flow/l0/s3/coupling/net0/weight", ...). A
//! [`Session`] wraps one tape and lazily binds store entries as leaves, so
//! a forward pass records gradients for exactly the parameters it touched.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Fixed structural data (permutations, signs) is stored but never
    /// updated by the optimizer.
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid {
                ctx: "ParamStore::insert",
                msg: format!("duplicate parameter {name}"),
            });
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| TensorError::Invalid {
                ctx: "ParamStore::get",
                msg: format!("unknown parameter {name}"),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.entries[i].trainable)
            .unwrap_or(false)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| TensorError::Invalid {
            ctx: "ParamStore::set",
            msg: format!("unknown parameter {name}"),
        })?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                ctx: "ParamStore::set",
                expected: self.entries[i].value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalar coordinates.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(&e.name, e.value.cast::<U>(), e.trainable)
                .expect("cast preserves unique names");
        }
        out
    }
}

/// One forward/backward pass: a tape plus the store parameters bound to it.
pub struct Session<'a, T: Scalar> {
    tape: Tape<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    bound: RefCell<(Vec<(String, Var<T>)>, HashMap<String, usize>)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: RefCell::new((Vec::new(), HashMap::new())),
        }
    }

    /// A session recording onto an existing tape, so model parameters and
    /// caller-created variables share one graph.
    pub fn with_tape(store: &'a ParamStore<T>, trainable: bool, tape: Tape<T>) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new((Vec::new(), HashMap::new())),
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Binds a store parameter as a tape leaf (cached per session).
    pub fn param(&self, name: &str) -> Result<Var<T>> {
        {
            let bound = self.bound.borrow();
            if let Some(&i) = bound.1.get(name) {
                return Ok(bound.0[i].1.clone());
            }
        }
        let value = self.store.get(name)?.clone();
        let trainable = self.trainable && self.store.is_trainable(name);
        let var = if trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        let mut bound = self.bound.borrow_mut();
        let idx = bound.0.len();
        bound.1.insert(name.to_string(), idx);
        bound.0.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// Pre-binds `name` to an existing variable, overriding the store's
    /// value for this session. Used to probe a parameter as a graph input.
    pub fn bind_override(&self, name: &str, var: Var<T>) {
        let mut bound = self.bound.borrow_mut();
        let idx = bound.0.len();
        bound.1.insert(name.to_string(), idx);
        bound.0.push((name.to_string(), var));
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.tape.constant(value)
    }

    /// Gradients for every parameter bound during this session, in binding
    /// order (deterministic).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        self.bound
            .borrow()
            .0
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(name, var)| (name.clone(), grads.wrt(var)))
            .collect()
    }
}

/// He-style normal initialization for a conv weight `[O, I, K, K]`.
pub fn init_conv_weight<T: Scalar>(
    rng: &mut impl Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> Tensor<T> {
    let std = (1.0 / (in_c * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Tensor::from_fn(vec![out_c, in_c, k, k], |_| {
        T::from_f64(dist.sample(rng))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_rejects_duplicates() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("a", Tensor::zeros(vec![2]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(vec![2]), true).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("a", Tensor::zeros(vec![2]), true).unwrap();
        assert!(s.set("a", Tensor::zeros(vec![3])).is_err());
        assert!(s.set("a", Tensor::full(vec![2], 1.0)).is_ok());
    }

    #[test]
    fn session_caches_bindings() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("w", Tensor::full(vec![2], 3.0), true).unwrap();
        let sess = Session::new(&s, true);
        let a = sess.param("w").unwrap();
        let b = sess.param("w").unwrap();
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn non_trainable_params_get_no_grads() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("w", Tensor::full(vec![2], 3.0), true).unwrap();
        s.insert("fixed", Tensor::full(vec![2], 1.0), false).unwrap();
        let sess = Session::new(&s, true);
        let w = sess.param("w").unwrap();
        let f = sess.param("fixed").unwrap();
        let loss = w.mul(&f).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let pg = sess.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, "w");
        assert_eq!(pg[0].1.data(), &[1.0, 1.0]);
    }
}
