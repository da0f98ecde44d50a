//! Trainable components: named parameters, AdamW, checkpoints and the three
//! networks.

mod displacement;
pub mod ops;
mod refine;
mod synthesis;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use displacement::{bin_centers, DisplacementConfig, DisplacementHead};
pub use refine::{
    blend, count_tokens, RefinementConfig, RefinementNet, RefinementOutput, RefinementVars,
};
pub use synthesis::{SynthInputs, SynthesisConfig, SynthesisNet, RecurrentState, SynthVars};

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every entry of `other` into `self`.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// He-normal convolution or linear weights.
    pub(crate) fn init_he(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub(crate) fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub(crate) fn init_conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
        self.init_he(&format!("{prefix}.w"), &[cout, cin, k, k], cin * k * k, 1.0, rng);
        self.init_const(&format!("{prefix}.b"), &[cout], 0.0);
    }

    pub(crate) fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        self.init_he(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, 1.0, rng);
        self.init_const(&format!("{prefix}.b"), &[fan_out], 0.0);
    }
}

/// A graph plus lazily bound parameters. Parameters rejected by the
/// `trainable` predicate enter the graph as constants.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable: Box::new(trainable),
        }
    }

    /// Everything frozen: inference only.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn trainable_all(store: &'a ParamStore) -> Self {
        Self::new(store, |_| true)
    }

    /// # Panics
    /// If the parameter is missing; networks only ask for names they created.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|e| panic!("{e}"))
            .clone();
        let v = if (self.trainable)(name) {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Gradients of trainable parameters, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.g.conv2d(x, w, b, stride, pad)
    }

    /// `x: [M, fan_in]` → `[M, fan_out]`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let m = self.g.matmul(x, w);
        self.g.add_row_bias(m, b)
    }
}

/// Adam with decoupled weight decay. Decay applies to tensors of rank ≥ 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * *pv);
            }
        }
    }
}

/// Serialized model state: config echo, weights, optimizer, step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub step: u64,
}

impl Checkpoint {
    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        crate::io::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_vec(vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..300 {
            let mut ctx = Ctx::trainable_all(&store);
            let x = ctx.p("x");
            let sq = ctx.g.mul(x, x);
            let s = ctx.g.sum(sq);
            let grads = ctx.g.backward(s);
            let pg = ctx.param_grads(&grads);
            drop(ctx);
            opt.step(&mut store, &pg);
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::from_vec(vec![1.0]));
        store.insert("b.w", Tensor::from_vec(vec![2.0]));
        let mut ctx = Ctx::new(&store, |n| n.starts_with("b."));
        let a = ctx.p("a.w");
        let b = ctx.p("b.w");
        let m = ctx.g.mul(a, b);
        let s = ctx.g.sum(m);
        let grads = ctx.g.backward(s);
        let pg = ctx.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg["b.w"].data(), [1.0]);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.init_conv("c", 2, 3, 3, &mut rng);
        let ck = Checkpoint {
            kind: "synthesis".into(),
            config: serde_json::json!({"width": 4}),
            params: store,
            optimizer: Some(AdamW::new(1e-3, 1e-4)),
            step: 17,
        };
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert!(back.expect_kind("refinement").is_err());
    }
}
