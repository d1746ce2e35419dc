//! Named parameters and the small set of layers the model is built from.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. A forward pass creates a
//! [`Binder`] over a fresh [`Graph`], which turns each parameter into a graph
//! leaf the first time it is used, so a parameter a pass never touches never
//! enters the graph.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<F>>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor<F>> {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "parameter {} changed shape", self.names[id.0]);
        self.values[id.0] = Arc::new(value);
    }

    /// Mutable access, cloning the tensor first if a graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Xavier-uniform `fan_in x fan_out` matrix.
pub fn xavier<F: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| F::of(rng.gen_range(-limit..=limit))).collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

pub fn normal<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| F::of(dist.sample(rng))).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Binds parameters of one store into one graph.
pub struct Binder<'g, 's, F: Real> {
    graph: &'g Graph<F>,
    store: &'s ParamStore<F>,
    frozen: Vec<bool>,
    bound: RefCell<Vec<Option<Var<'g, F>>>>,
}

impl<'g, 's, F: Real> Binder<'g, 's, F> {
    pub fn new(graph: &'g Graph<F>, store: &'s ParamStore<F>) -> Self {
        Self::with_frozen(graph, store, |_| false)
    }

    /// Parameters whose name satisfies `frozen` enter the graph as constants.
    pub fn with_frozen(graph: &'g Graph<F>, store: &'s ParamStore<F>, frozen: impl Fn(&str) -> bool) -> Self {
        let frozen = store.names.iter().map(|n| frozen(n)).collect();
        Self { graph, store, frozen, bound: RefCell::new(vec![None; store.len()]) }
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var<'g, F> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), !self.frozen[id.0]);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Constant input tensor.
    pub fn input(&self, t: Tensor<F>) -> Var<'g, F> {
        self.graph.constant(t)
    }

    /// Parameters that entered the graph, bound or not trainable.
    pub fn bound_ids(&self) -> Vec<ParamId> {
        self.bound.borrow().iter().enumerate().filter(|(_, v)| v.is_some()).map(|(i, _)| ParamId(i)).collect()
    }

    /// Gradient per trainable bound parameter. Parameters without a path to
    /// the loss get a zero tensor.
    pub fn gradients(&self, grads: &Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        let bound = self.bound.borrow();
        bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if self.frozen[i] {
                    return None;
                }
                let (r, c) = self.store.values[i].shape();
                Some((ParamId(i), grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(r, c))))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut impl Rng, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, inp, out));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, out)));
        Self { w, b }
    }

    pub fn forward<'g, F: Real>(&self, p: &Binder<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        let y = x.matmul(p.var(self.w));
        match self.b {
            Some(b) => y.add_row(p.var(b)),
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::full(1, dim, F::one()));
        let beta = store.add(format!("{name}.b"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward<'g, F: Real>(&self, p: &Binder<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward<'g, F: Real>(&self, p: &Binder<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        self.fc2.forward(p, self.fc1.forward(p, x).gelu())
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of one attention call.
pub struct AttnOut<'g, F: Real> {
    pub out: Var<'g, F>,
    /// Post-softmax weights, one row per (block, query, head).
    pub probs: Var<'g, F>,
}

impl Attention {
    /// Queries come from width `q_dim`, keys and values from `kv_dim`; the
    /// attention width is `dim` and the output has width `out_dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), q_dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), kv_dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), kv_dim, dim, true),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, out_dim, true),
            heads,
        }
    }

    /// `xq` has `nq` rows (shared) or `blocks * nq` rows; `xkv` has `blocks * nk`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g, F: Real>(
        &self,
        p: &Binder<'g, '_, F>,
        xq: Var<'g, F>,
        xkv: Var<'g, F>,
        blocks: usize,
        nq: usize,
        nk: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> AttnOut<'g, F> {
        let q = self.q.forward(p, xq);
        let k = self.k.forward(p, xkv);
        let v = self.v.forward(p, xkv);
        let probs = q.attn_probs(k, self.heads, blocks, nq, nk, mask);
        let mixed = probs.attn_apply(v, self.heads, blocks, nq, nk);
        AttnOut { out: self.o.forward(p, mixed), probs }
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, dim, dim, dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio.max(1)),
        }
    }

    /// Self-attention over `blocks` sequences of `n` tokens each.
    pub fn forward<'g, F: Real>(
        &self,
        p: &Binder<'g, '_, F>,
        x: Var<'g, F>,
        blocks: usize,
        n: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> AttnOut<'g, F> {
        let h = self.ln1.forward(p, x);
        let a = self.attn.forward(p, h, h, blocks, n, n, mask);
        let x = x.add(a.out);
        let out = x.add(self.mlp.forward(p, self.ln2.forward(p, x)));
        AttnOut { out, probs: a.probs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binder_binds_once_and_skips_frozen() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("text.a", Tensor::full(1, 1, 2.0));
        let b = store.add("b", Tensor::full(1, 1, 3.0));
        let _unused = store.add("c", Tensor::full(1, 1, 4.0));
        let g = Graph::new();
        let p = Binder::with_frozen(&g, &store, |n| n.starts_with("text."));
        let loss = p.var(a).mul(p.var(b)).mul(p.var(b)).sum_all();
        assert_eq!(p.bound_ids(), vec![a, b]);
        let grads = p.gradients(&g.backward(loss));
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, b);
        assert!((grads[0].1.data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2, true);
        store.set(lin.b.unwrap(), Tensor::from_f64(1, 2, &[1.0, -1.0]));
        let g = Graph::new();
        let p = Binder::new(&g, &store);
        let x = Tensor::from_f64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = lin.forward(&p, p.input(x.clone())).value();
        let w = store.get(lin.w);
        for r in 0..2 {
            for c in 0..2 {
                let want: f64 = (0..3).map(|k| x.get(r, k) * w.get(k, c)).sum::<f64>() + [1.0, -1.0][c];
                assert!((y.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_is_equivariant_over_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let blk = Block::new(&mut store, &mut rng, "b", 8, 2, 2);
        let x = normal::<f64>(&mut rng, 6, 8, 1.0);
        let g = Graph::new();
        let p = Binder::new(&g, &store);
        let both = blk.forward(&p, p.input(x.clone()), 2, 3, None).out.value();
        let first = blk.forward(&p, p.input(Tensor::from_vec(3, 8, x.data()[..24].to_vec())), 1, 3, None).out.value();
        for (a, b) in both.data()[..24].iter().zip(first.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
