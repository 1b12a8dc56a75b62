use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::numerics::{checkpoint, Graph, NumericsError, Result, Tensor, Var};

/// Named model parameters in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Bound { store: self, vars }
    }

    /// Wraps existing graph leaves, one per parameter in store order.
    pub fn bind_vars<'a>(&'a self, vars: Vec<Var>) -> Bound<'a> {
        assert_eq!(vars.len(), self.tensors.len(), "one variable per parameter");
        Bound { store: self, vars }
    }

    /// Adds every parameter to `g` as a constant (inference).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Bound { store: self, vars }
    }
}

/// Graph handles of a [`ParamStore`]'s parameters, in store order.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.insert(name, t);
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) {
        self.store.insert(name, Tensor::full(shape, v));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64) {
        self.normal(format!("{prefix}.w"), &[fan_in, fan_out], std);
        self.fill(format!("{prefix}.b"), &[fan_out], 0.0);
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        self.normal(format!("{prefix}.w"), &[k, k, cin, cout], std);
        self.fill(format!("{prefix}.b"), &[cout], 0.0);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.fill(format!("{prefix}.g"), &[c], 1.0);
        self.fill(format!("{prefix}.b"), &[c], 0.0);
    }

    fn attention(&mut self, prefix: &str, c: usize) {
        let std = 1.0 / (c as f64).sqrt();
        for p in ["q", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), c, c, std);
        }
        self.normal(format!("{prefix}.k.w"), &[c, c], std);
    }
}

/// Backbone layer widths: input, two hidden stages, then `C` twice.
pub fn backbone_widths(c: usize) -> [usize; 5] {
    [3, 16, 32, c, c]
}

/// Stride of each backbone layer; their product is the feature stride 4.
pub const BACKBONE_STRIDES: [usize; 4] = [2, 2, 1, 1];

/// Fresh parameters for `cfg`, drawn from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
    let c = cfg.channels;
    let widths = backbone_widths(c);
    for l in 0..4 {
        init.conv(&format!("backbone.{l}"), 3, widths[l], widths[l + 1]);
    }
    init.normal("init.query".into(), &[cfg.queries, c], 1.0);
    // relative (cx, cy, w, h): centres spread over the frame, half-frame size
    let mut boxes = Tensor::uniform(&[cfg.queries, 4], 0.25, 0.75, &mut init.rng);
    for r in boxes.data_mut().chunks_mut(4) {
        r[2] = 0.5;
        r[3] = 0.5;
    }
    init.store.insert("init.box", boxes);
    let roi = cfg.roi_size * cfg.roi_size;
    for m in 0..cfg.iterations {
        let p = |s: &str| format!("it{m}.{s}");
        init.attention(&p("temporal"), c);
        init.norm(&p("temporal_norm"), c);
        init.attention(&p("spatial"), c);
        init.norm(&p("spatial_norm"), c);
        init.linear(&p("filter"), c, c * c, 1.0 / c as f64);
        init.linear(&p("filter_bias"), c, c, 1.0 / c as f64);
        init.linear(&p("pool"), roi * c, c, (2.0 / (roi * c) as f64).sqrt());
        init.linear(&p("cls"), c, cfg.num_classes + 1, 0.01);
        init.linear(&p("box"), c, 4, 0.0);
        init.linear(&p("update"), c, c, 1.0 / (c as f64).sqrt());
        init.norm(&p("update_norm"), c);
        init.conv(&p("mask.0"), 1, c, c);
        init.conv(&p("mask.1"), 3, c, 1);
    }
    store
}

/// Writes parameters and `meta` (model config and anything else) to `path`.
pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let pairs: Vec<(String, Tensor)> = params.names.iter().cloned().zip(params.tensors.iter().cloned()).collect();
    checkpoint::save(path, &pairs, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let (pairs, meta) = checkpoint::load(path)?;
    let mut store = ParamStore::new();
    for (name, t) in pairs {
        if store.get(&name).is_some() {
            return Err(NumericsError::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.insert(name, t);
    }
    Ok((store, meta))
}
