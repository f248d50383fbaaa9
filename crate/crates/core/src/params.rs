//! Named parameter storage and per-tape binding.
//!
//! Parameters live in a sorted map so iteration order (and therefore
//! initialization, update and serialization order) is stable. A `Bindings`
//! wraps one store for the duration of one tape and guarantees each
//! parameter is bound as a single shared leaf no matter how many graph
//! sites use it, so its gradient accumulates in one place.

use std::collections::BTreeMap;

use crate::autodiff::{Scalar, Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub type ParamStore<S> = BTreeMap<String, Tensor<S>>;

/// Insert a truncated-normal initialized tensor under `name`.
pub fn init_normal<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    dims: &[usize],
    std: f64,
    rng: &mut Rng,
) {
    store.insert(name.to_string(), Tensor::randn(dims, std, rng));
}

/// Insert an all-zero tensor under `name`.
pub fn init_zero<S: Scalar>(store: &mut ParamStore<S>, name: &str, dims: &[usize]) {
    store.insert(name.to_string(), Tensor::zeros(dims));
}

pub struct Bindings<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    ids: BTreeMap<String, ValueId>,
}

impl<'p, S: Scalar> Bindings<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Bindings {
            params,
            ids: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<S> {
        self.params
    }

    /// Route `name` at an existing tape value instead of the store. Gradient
    /// checking uses this to substitute externally perturbed leaves.
    pub fn preset(&mut self, name: &str, id: ValueId) {
        self.ids.insert(name.to_string(), id);
    }

    /// Tape id for `name`, binding it on first use.
    pub fn get(&mut self, tape: &mut Tape<'p, S>, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingParam {
                name: name.to_string(),
            })?;
        let id = tape.shared(t);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients for every parameter bound into this tape, in name order.
    /// Parameters never bound (or receiving no flow) are absent.
    pub fn gradients(&self, tape: &Tape<'p, S>) -> BTreeMap<String, Vec<S>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            if let Some(g) = tape.grad(id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rebinding_the_same_name_reuses_one_leaf() {
        let mut store = ParamStore::<f64>::new();
        init_zero(&mut store, "w", &[2]);
        store.get_mut("w").unwrap().values = vec![1.0, 2.0];
        let mut tape = Tape::new();
        let mut bind = Bindings::new(&store);
        let a = bind.get(&mut tape, "w").unwrap();
        let b = bind.get(&mut tape, "w").unwrap();
        assert_eq!(a, b);
        // both uses feed one accumulator
        let s1 = tape.sum(a);
        let s2 = tape.sum(b);
        let tot = tape.add(s1, s2).unwrap();
        tape.backward(tot).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn missing_parameter_is_a_named_error() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let mut bind = Bindings::new(&store);
        let err = bind.get(&mut tape, "w/nope").unwrap_err().to_string();
        assert!(err.contains("w/nope"), "{err}");
    }

    #[test]
    fn gradients_skips_unreached_parameters() {
        let mut store = ParamStore::<f64>::new();
        init_zero(&mut store, "used", &[2]);
        init_zero(&mut store, "idle", &[2]);
        let mut tape = Tape::new();
        let mut bind = Bindings::new(&store);
        let u = bind.get(&mut tape, "used").unwrap();
        let _i = bind.get(&mut tape, "idle").unwrap();
        let s = tape.sum(u);
        tape.backward(s).unwrap();
        let g = bind.gradients(&tape);
        assert!(g.contains_key("used"));
        assert!(!g.contains_key("idle"));
    }
}
