use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{round_f32, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of model parameters.
///
/// Values are kept exactly representable in `f32` so that checkpoints,
/// which store `f32`, reload bit-identically.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mut value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        for v in value.data_mut() {
            *v = round_f32(*v);
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(true);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    /// Overwrites a parameter; values are rounded to `f32` precision.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "{}", self.names[id.0]);
        let mut value = value;
        for v in value.data_mut() {
            *v = round_f32(*v);
        }
        self.values[id.0] = value;
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    /// Marks exactly the parameters whose name starts with one of `prefixes`
    /// as trainable.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for (name, t) in self.names.iter().zip(self.trainable.iter_mut()) {
            *t = prefixes.iter().any(|p| name.starts_with(p));
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Helper bundling the store and the initialisation RNG while a model is
/// being built.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are materialised as graph leaves on first use; trainable
/// parameters require gradients, frozen ones are constants.
pub struct Graph<'p> {
    store: &'p ParamStore,
    leaves: RefCell<HashMap<ParamId, Var>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, train: bool, rng: ChaCha8Rng) -> Self {
        Graph {
            store,
            leaves: RefCell::new(HashMap::new()),
            train,
            rng: RefCell::new(rng),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.leaves
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| {
                let value = self.store.value(id).clone();
                if self.store.is_trainable(id) {
                    Var::leaf(value)
                } else {
                    Var::constant(value)
                }
            })
            .clone()
    }

    /// Standard normal noise of the given shape.
    pub fn randn(&self, shape: &[usize]) -> Tensor {
        let mut rng = self.rng.borrow_mut();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&self, x: &Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x.clone();
        }
        let mut rng = self.rng.borrow_mut();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        x.mul_const(&Tensor::new(x.shape().to_vec(), mask))
    }

    /// Gradients of every trainable parameter touched by this graph.
    pub fn grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let leaves = self.leaves.borrow();
        let mut out: Vec<(ParamId, Vec<f64>)> = leaves
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(&id, v)| {
                let g = v.grad().unwrap_or_else(|| vec![0.0; v.numel()]);
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| id.0);
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

/// Adam with decoupled weight decay. Moment estimates are rounded to `f32`
/// after every step so that the optimiser state checkpoints losslessly.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: HashMap<ParamId, Vec<f64>>,
    pub v: HashMap<ParamId, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update with learning rate `lr`. Returns the pre-clip
    /// global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) -> f64 {
        self.step += 1;
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (id, g) in grads {
            let decay = store.value(*id).shape().len() >= 2;
            let n = g.len();
            let m = self.m.entry(*id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(*id).or_insert_with(|| vec![0.0; n]);
            let p = store.value_mut(*id).data_mut();
            for i in 0..n {
                let gi = g[i] * clip;
                m[i] = round_f32(self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi);
                v[i] = round_f32(self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi);
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut upd = mhat / (vhat.sqrt() + self.cfg.eps);
                if decay {
                    upd += self.cfg.weight_decay * p[i];
                }
                p[i] = round_f32(p[i] - lr * upd);
            }
        }
        norm
    }
}
