//! Parameter storage, graph binding with freeze policies, and optimization.
//!
//! All weights live in one [`ParamStore`] under slash-separated names
//! ("msvq/enc/c0/w", "var/block2/cross/wq", …). A [`Session`] owns one
//! forward graph and binds parameters on demand: names matched by the
//! session's trainable prefixes enter the graph as differentiable leaves,
//! everything else as constants. That single mechanism implements every
//! stage's freeze contract.

mod layers;

pub use layers::*;

use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Insertion-ordered named tensor store. Order is load-bearing: checkpoint
/// layout and gradient application both follow it.
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a new parameter. Names are unique by construction.
    pub fn insert(&mut self, name: &str, value: ArrayD<F>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        &self.values[i]
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    /// Replace a value in place; the shape must not change.
    pub fn set(&mut self, name: &str, value: ArrayD<F>) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        assert_eq!(
            self.values[i].shape(),
            value.shape(),
            "shape change on set({name})"
        );
        self.values[i] = value;
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Names in insertion order, optionally restricted to a prefix.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.names
            .iter()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Order-sensitive FNV-1a over the bit patterns of every value under
    /// `prefix`. Used to verify freeze contracts: untouched sections keep
    /// their fingerprint bit-exactly.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, value) in self.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in value.iter() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// One forward pass: a graph plus the binding of store parameters into it.
pub struct Session<'s, F: Scalar> {
    pub g: Graph<F>,
    store: &'s ParamStore<F>,
    trainable_prefixes: Vec<String>,
    bound: HashMap<String, Var>,
    bind_order: Vec<String>,
}

impl<'s, F: Scalar> Session<'s, F> {
    /// `trainable_prefixes` selects which parameters become differentiable
    /// leaves; everything else binds frozen. An empty list freezes all.
    pub fn new(store: &'s ParamStore<F>, trainable_prefixes: &[&str]) -> Self {
        Session {
            g: Graph::new(),
            store,
            trainable_prefixes: trainable_prefixes.iter().map(|s| s.to_string()).collect(),
            bound: HashMap::new(),
            bind_order: Vec::new(),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable_prefixes.iter().any(|p| name.starts_with(p))
    }

    /// Bind a named parameter into the graph (memoized per session).
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let value = self.store.get(name).clone();
        let var = if self.is_trainable(name) {
            self.g.param(value)
        } else {
            self.g.constant(value)
        };
        self.bound.insert(name.to_string(), var);
        self.bind_order.push(name.to_string());
        var
    }

    /// Collect `(name, gradient)` for every trainable parameter bound in this
    /// session, in bind order. Parameters the loss never touched get `None`.
    pub fn trainable_grads(&self, grads: &Gradients<F>) -> Vec<(String, Option<ArrayD<F>>)> {
        self.bind_order
            .iter()
            .filter(|n| self.is_trainable(n))
            .map(|n| (n.clone(), grads.get(self.bound[n]).cloned()))
            .collect()
    }
}

/// Adaptive-moment optimizer with bias correction (β1, β2, ε).
pub struct Adam<F: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: HashMap<String, ArrayD<F>>,
    v: HashMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update over the given `(name, grad)` pairs. `None` grads are
    /// skipped entirely (their moments do not advance).
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[(String, Option<ArrayD<F>>)],
        lr: f64,
    ) {
        self.t += 1;
        let b1 = F::cast(self.beta1);
        let b2 = F::cast(self.beta2);
        let one = F::one();
        let c1 = F::cast(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::cast(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::cast(lr);
        let eps = F::cast(self.eps);
        for (name, grad) in grads {
            let Some(grad) = grad else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |mv, &gv| *mv = b1 * *mv + (one - b1) * gv);
            v.zip_mut_with(grad, |vv, &gv| *vv = b2 * *vv + (one - b2) * gv * gv);
            let mut value = store.get(name).clone();
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / c1;
                    let vhat = vv / c2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
            store.set(name, value);
        }
    }
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Cosine-annealed learning rate with exact endpoints:
/// `lr(0) = lr_init`, `lr(total-1) = lr_final`, monotone non-increasing.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total <= 1 {
        return lr_init;
    }
    let s = step.min(total - 1) as f64 / (total - 1) as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * s).cos())
}

/// splitmix64 finalizer: one fixed root seed fans out to per-module streams.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for the given module stream.
pub fn rng_for(root: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream))
}

/// Module stream indices for [`rng_for`]; keeping them in one place makes
/// seed reuse collisions impossible.
pub mod streams {
    pub const CORPUS: u64 = 0;
    pub const MSVQ_INIT: u64 = 1;
    pub const VAR_INIT: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const RESTORER_INIT: u64 = 4;
    pub const PERCEPTUAL: u64 = 5;
    pub const TASK_SAMPLER: u64 = 6;
    pub const DEGRADATION: u64 = 7;
}
