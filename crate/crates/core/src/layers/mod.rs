//! Named parameter storage and the reusable differentiable blocks built from it.

mod blocks;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{projection, rel_error, GradReport};
use crate::tensor::{Element, Graph, Mode, Tensor, Var};

pub use blocks::{
    skip_fuse, BatchNorm, Conv, ConvBnRelu, FuseMode, ResidualBlock, SeparableConv,
};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    /// Trainable entries receive gradients; the rest are buffers (running statistics).
    pub trainable: bool,
}

/// Parameters keyed by dot-separated path, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Param(format!("duplicate parameter path '{path}'")));
        }
        let tensor = tensor.with_requires_grad(trainable);
        let (idx, _) = self.entries.insert_full(path, ParamEntry { tensor, trainable });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.entries.get_index_of(path).map(ParamId)
    }

    pub fn get(&self, path: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total trainable elements.
    pub fn trainable_numel(&self) -> usize {
        self.numel_with_prefix("")
    }

    /// Trainable elements whose path starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| e.trainable && k.starts_with(prefix))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    /// Add the gradients of parameter leaves in `graph` to the matching grad slots.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (tag, g) in graph.tagged_grads() {
            if let Some((_, e)) = self.entries.get_index_mut(tag) {
                if e.trainable {
                    e.tensor.accumulate_grad(g);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(|e| e.tensor.zero_grad());
    }
}

/// Deterministic parameter initializer with a path-prefix stack.
pub struct ParamBuilder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Element> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Run `f` with `name` pushed onto the path prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn path(&self, name: &str) -> String {
        let mut parts: Vec<&str> = self.prefix.iter().map(String::as_str).collect();
        parts.push(name);
        parts.join(".")
    }

    pub fn prefix(&self) -> String {
        self.prefix.join(".")
    }

    /// Conv weight `[cout, cin_g, k, k]` drawn from `N(0, 2 / fan_in)`.
    pub fn conv_weight(&mut self, name: &str, shape: [usize; 4]) -> Result<ParamId> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)));
        self.store.insert(self.path(name), t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<ParamId> {
        let t = Tensor::full(shape.to_vec(), T::lit(value));
        self.store.insert(self.path(name), t, trainable)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnSettings {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BnSettings {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Everything a block needs during a forward pass.
pub struct Ctx<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a mut ParamStore<T>,
    /// Batch-norm uses batch statistics (and updates running ones) when set.
    pub train: bool,
    pub bn: BnSettings,
    pub align_corners: bool,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a mut ParamStore<T>, train: bool) -> Self {
        Self {
            graph,
            params,
            train,
            bn: BnSettings::default(),
            align_corners: false,
        }
    }

    /// Bring a parameter into the graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(id.0, self.params.tensor(id))
    }

    /// Bilinear resize to `(h, w)` using the context's corner convention; a no-op when
    /// the size already matches.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.graph.shape(x);
        if s.len() == 4 && s[2] == h && s[3] == w {
            return Ok(x);
        }
        self.graph.upsample_bilinear(x, h, w, self.align_corners)
    }
}

/// Finite-difference check of a block: gradients w.r.t. the input and every trainable
/// parameter of `store`, for the scalar `sum(forward(x) * R)`.
pub fn check_block_gradients<F>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    train: bool,
    forward: F,
    eps: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, input: &Tensor<f64>, mode: Mode| -> Result<(f64, Option<Vec<f64>>, ParamStore<f64>)> {
        let mut g = Graph::new(mode);
        let mut params = store.clone();
        let x = g.leaf(input.clone().with_requires_grad(true));
        let out = {
            let mut ctx = Ctx::new(&mut g, &mut params, train);
            forward(&mut ctx, x)?
        };
        let proj = g.constant(projection(g.shape(out), seed));
        let prod = g.mul(out, proj)?;
        let loss = g.sum_all(prod);
        let value = g.value(loss).item();
        if mode == Mode::Training {
            g.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&g);
            let gx = g.grad(x).map(<[f64]>::to_vec);
            return Ok((value, gx, params));
        }
        Ok((value, None, params))
    };

    let (_, gx, with_grads) = eval(store, input, Mode::Training)?;
    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut record = |analytic: f64, numeric: f64, slot: (usize, usize)| {
        let err = rel_error(analytic, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = slot;
        }
        report.checked += 1;
    };

    let gx = gx.unwrap_or_else(|| vec![0.0; input.numel()]);
    let mut x = input.clone();
    for j in 0..x.numel() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + eps;
        let plus = eval(store, &x, Mode::Inference)?.0;
        x.data_mut()[j] = orig - eps;
        let minus = eval(store, &x, Mode::Inference)?.0;
        x.data_mut()[j] = orig;
        record(gx[j], (plus - minus) / (2.0 * eps), (0, j));
    }

    let mut work = store.clone();
    for id in store.ids() {
        if !store.entries[id.0].trainable {
            continue;
        }
        let analytic = with_grads
            .tensor(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.tensor(id).numel()]);
        for j in 0..analytic.len() {
            let orig = work.tensor(id).data()[j];
            work.tensor_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(&work, input, Mode::Inference)?.0;
            work.tensor_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(&work, input, Mode::Inference)?.0;
            work.tensor_mut(id).data_mut()[j] = orig;
            record(analytic[j], (plus - minus) / (2.0 * eps), (id.0 + 1, j));
        }
    }
    Ok(report)
}
