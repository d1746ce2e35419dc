//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough cached state for the vector-Jacobian product. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that transitively depends on a parameter leaf.
//!
//! Attention is exposed as two fused ops, [`Var::attn_probs`] and
//! [`Var::attn_apply`], so the post-softmax weights are an ordinary node that
//! losses can consume.

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{Real, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone)]
pub(crate) struct AttnShape {
    heads: usize,
    blocks: usize,
    nq: usize,
    nk: usize,
    /// Queries are shared by every block when true (one `nq x d` matrix).
    shared_q: bool,
    scale: f64,
    /// `nq x nk`, true = attendable.
    mask: Option<Arc<Vec<bool>>>,
}

enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Affine(usize, F),
    MulScalar(usize, usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Gelu(usize),
    Clamp(usize, F, F),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor<F>, rstd: Vec<F> },
    L2Normalize { x: usize, norms: Vec<F> },
    RowDot(usize, usize),
    Transpose(usize),
    Reshape(usize),
    GatherRows(usize, Arc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    BlockMean(usize, usize),
    BlockGram(usize, usize),
    AttnProbs { q: usize, k: usize, shape: AttnShape },
    AttnApply { p: usize, v: usize, heads: usize, blocks: usize, nq: usize, nk: usize },
    LogSoftmaxRows(usize),
    WeightedSum(usize, Arc<Tensor<F>>),
    BceMean(usize, Arc<Tensor<F>>),
    SumAll(usize),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine(..) => "affine",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Clamp(..) => "clamp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::RowDot(..) => "row_dot",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::BlockMean(..) => "block_mean",
            Op::BlockGram(..) => "block_gram",
            Op::AttnProbs { .. } => "attn_probs",
            Op::AttnApply { .. } => "attn_apply",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::WeightedSum(..) => "weighted_sum",
            Op::BceMean(..) => "bce_mean",
            Op::SumAll(..) => "sum_all",
        }
    }
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Real> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of every op on the tape, in insertion order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(Arc::new(value), false)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(Arc::new(value), true)
    }

    pub fn leaf(&self, value: Arc<Tensor<F>>, needs_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Backpropagate from a scalar (`1 x 1`) output.
    pub fn backward(&self, loss: Var<'_, F>) -> Gradients<F> {
        assert_eq!(loss.shape(), (1, 1), "backward() needs a scalar; use backward_from for seeds");
        self.backward_from(&[(loss, Tensor::full(1, 1, F::one()))])
    }

    /// Backpropagate from arbitrary output seeds (vector-Jacobian product).
    pub fn backward_from(&self, seeds: &[(Var<'_, F>, Tensor<F>)]) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, seed) in seeds {
            assert_eq!(nodes[v.id].value.shape(), seed.shape(), "seed shape mismatch");
            acc(&mut grads, v.id, &nodes[v.id].value, |g| g.add_assign(seed));
            last = last.max(v.id);
        }
        for id in (0..=last).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &mut grads, id, &g);
        }
        Gradients { grads }
    }
}

/// Accumulate into `grads[id]`, allocating zeros shaped like `like` first.
fn acc<F: Real>(
    grads: &mut [Option<Tensor<F>>],
    id: usize,
    like: &Tensor<F>,
    f: impl FnOnce(&mut Tensor<F>),
) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()));
    f(slot);
}

fn backprop<F: Real>(nodes: &[Node<F>], grads: &mut [Option<Tensor<F>>], id: usize, g: &Tensor<F>) {
    let node = &nodes[id];
    let out = &*node.value;
    let val = |i: usize| &*nodes[i].value;
    let wants = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, kdim, n) = (av.rows(), av.cols(), bv.cols());
            if wants(a) {
                acc(grads, a, av, |da| {
                    F::gemm(m, n, kdim, F::one(), g.data(), n as isize, 1, bv.data(), 1, n as isize, F::one(), da.data_mut(), kdim as isize, 1)
                });
            }
            if wants(b) {
                acc(grads, b, bv, |db| {
                    F::gemm(kdim, m, n, F::one(), av.data(), 1, kdim as isize, g.data(), n as isize, 1, F::one(), db.data_mut(), n as isize, 1)
                });
            }
        }
        &Op::MatMulNt(a, b) => {
            // y = a b^T, a: m x d, b: n x d
            let (av, bv) = (val(a), val(b));
            let (m, d, n) = (av.rows(), av.cols(), bv.rows());
            if wants(a) {
                acc(grads, a, av, |da| {
                    F::gemm(m, n, d, F::one(), g.data(), n as isize, 1, bv.data(), d as isize, 1, F::one(), da.data_mut(), d as isize, 1)
                });
            }
            if wants(b) {
                acc(grads, b, bv, |db| {
                    F::gemm(n, m, d, F::one(), g.data(), 1, n as isize, av.data(), d as isize, 1, F::one(), db.data_mut(), d as isize, 1)
                });
            }
        }
        &Op::Add(a, b) => {
            if wants(a) {
                acc(grads, a, val(a), |da| da.add_assign(g));
            }
            if wants(b) {
                acc(grads, b, val(b), |db| db.add_assign(g));
            }
        }
        &Op::Sub(a, b) => {
            if wants(a) {
                acc(grads, a, val(a), |da| da.add_assign(g));
            }
            if wants(b) {
                acc(grads, b, val(b), |db| {
                    for (d, &x) in db.data_mut().iter_mut().zip(g.data()) {
                        *d = *d - x;
                    }
                });
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if wants(a) {
                acc(grads, a, av, |da| {
                    for ((d, &x), &y) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d = *d + x * y;
                    }
                });
            }
            if wants(b) {
                acc(grads, b, bv, |db| {
                    for ((d, &x), &y) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d = *d + x * y;
                    }
                });
            }
        }
        &Op::AddRow(a, r) => {
            if wants(a) {
                acc(grads, a, val(a), |da| da.add_assign(g));
            }
            if wants(r) {
                acc(grads, r, val(r), |dr| {
                    let d = dr.data_mut();
                    for row in 0..g.rows() {
                        for (acc, &x) in d.iter_mut().zip(g.row(row)) {
                            *acc = *acc + x;
                        }
                    }
                });
            }
        }
        &Op::Affine(a, mul) => {
            if wants(a) {
                acc(grads, a, val(a), |da| {
                    for (d, &x) in da.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + mul * x;
                    }
                });
            }
        }
        &Op::MulScalar(a, s) => {
            let (av, sv) = (val(a), val(s).data()[0]);
            if wants(a) {
                acc(grads, a, av, |da| {
                    for (d, &x) in da.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + sv * x;
                    }
                });
            }
            if wants(s) {
                let dot: F = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                acc(grads, s, val(s), |ds| ds.data_mut()[0] = ds.data_mut()[0] + dot);
            }
        }
        &Op::Exp(a) => unary_back(grads, a, val(a), g, |i, _| out.data()[i]),
        &Op::Log(a) => unary_back(grads, a, val(a), g, |_, x| F::one() / x),
        &Op::Sigmoid(a) => unary_back(grads, a, val(a), g, |i, _| {
            let s = out.data()[i];
            s * (F::one() - s)
        }),
        &Op::Gelu(a) => unary_back(grads, a, val(a), g, |_, x| gelu_grad(x)),
        &Op::Clamp(a, lo, hi) => unary_back(grads, a, val(a), g, |_, x| {
            if x > lo && x < hi {
                F::one()
            } else {
                F::zero()
            }
        }),
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let gam = val(gamma).data();
            let cols = xhat.cols();
            let n = F::of(cols as f64);
            if wants(gamma) {
                acc(grads, gamma, val(gamma), |dg| {
                    let d = dg.data_mut();
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            d[c] = d[c] + g.get(r, c) * xhat.get(r, c);
                        }
                    }
                });
            }
            if wants(beta) {
                acc(grads, beta, val(beta), |db| {
                    let d = db.data_mut();
                    for r in 0..g.rows() {
                        for (acc, &v) in d.iter_mut().zip(g.row(r)) {
                            *acc = *acc + v;
                        }
                    }
                });
            }
            if wants(x) {
                acc(grads, x, val(x), |dx| {
                    let mut dxhat = vec![F::zero(); cols];
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                            mean_d = mean_d + dxhat[c];
                            mean_dx = mean_dx + dxhat[c] * xh[c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        let out_row = dx.row_mut(r);
                        for c in 0..cols {
                            out_row[c] = out_row[c] + rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
            }
        }
        Op::L2Normalize { x, norms } => {
            let x = *x;
            if wants(x) {
                acc(grads, x, val(x), |dx| {
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let inv = F::one() / norms[r];
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = *d + (gr[c] - y[c] * dot) * inv;
                        }
                    }
                });
            }
        }
        &Op::RowDot(a, b) => {
            let (av, bv) = (val(a), val(b));
            let nb = bv.rows();
            if wants(a) {
                acc(grads, a, av, |da| {
                    for r in 0..av.rows() {
                        let s = g.data()[r];
                        for (d, &y) in da.row_mut(r).iter_mut().zip(bv.row(r % nb)) {
                            *d = *d + s * y;
                        }
                    }
                });
            }
            if wants(b) {
                acc(grads, b, bv, |db| {
                    for r in 0..av.rows() {
                        let s = g.data()[r];
                        for (d, &y) in db.row_mut(r % nb).iter_mut().zip(av.row(r)) {
                            *d = *d + s * y;
                        }
                    }
                });
            }
        }
        &Op::Transpose(a) => {
            if wants(a) {
                let gt = g.transpose();
                acc(grads, a, val(a), |da| da.add_assign(&gt));
            }
        }
        &Op::Reshape(a) => {
            if wants(a) {
                acc(grads, a, val(a), |da| {
                    for (d, &x) in da.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + x;
                    }
                });
            }
        }
        Op::GatherRows(a, idx) => {
            let a = *a;
            if wants(a) {
                acc(grads, a, val(a), |da| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, &x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d = *d + x;
                        }
                    }
                });
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let rows = pv.rows();
                if wants(p) {
                    acc(grads, p, pv, |dp| {
                        let cols = pv.cols();
                        let src = &g.data()[offset * cols..(offset + rows) * cols];
                        for (d, &x) in dp.data_mut().iter_mut().zip(src) {
                            *d = *d + x;
                        }
                    });
                }
                offset += rows;
            }
        }
        &Op::BlockMean(a, block) => {
            if wants(a) {
                let inv = F::one() / F::of(block as f64);
                acc(grads, a, val(a), |da| {
                    for r in 0..da.rows() {
                        let gr = g.row(r / block);
                        for (d, &x) in da.row_mut(r).iter_mut().zip(gr) {
                            *d = *d + x * inv;
                        }
                    }
                });
            }
        }
        &Op::BlockGram(a, block) => {
            let av = val(a);
            if wants(a) {
                acc(grads, a, av, |da| {
                    let blocks = av.rows() / block;
                    for b in 0..blocks {
                        for i in 0..block {
                            let ri = b * block + i;
                            for j in 0..block {
                                let rj = b * block + j;
                                let w = g.get(ri, j) + g.get(rj, i);
                                if w == F::zero() {
                                    continue;
                                }
                                let src = av.row(rj).to_vec();
                                for (d, x) in da.row_mut(ri).iter_mut().zip(src) {
                                    *d = *d + w * x;
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::AttnProbs { q, k, shape } => attn_probs_back(nodes, grads, *q, *k, shape, out, g),
        &Op::AttnApply { p, v, heads, blocks, nq, nk } => {
            let (pv, vv) = (val(p), val(v));
            let d = vv.cols();
            let dh = d / heads;
            if wants(p) {
                acc(grads, p, pv, |dp| {
                    for b in 0..blocks {
                        for i in 0..nq {
                            let grow = g.row(b * nq + i);
                            for h in 0..heads {
                                let prow = dp.row_mut((b * nq + i) * heads + h);
                                let gs = &grow[h * dh..(h + 1) * dh];
                                for (j, dpj) in prow.iter_mut().enumerate().take(nk) {
                                    let vs = &vv.row(b * nk + j)[h * dh..(h + 1) * dh];
                                    *dpj = *dpj + dot(gs, vs);
                                }
                            }
                        }
                    }
                });
            }
            if wants(v) {
                acc(grads, v, vv, |dv| {
                    for b in 0..blocks {
                        for i in 0..nq {
                            let grow = g.row(b * nq + i);
                            for h in 0..heads {
                                let prow = pv.row((b * nq + i) * heads + h);
                                let gs = &grow[h * dh..(h + 1) * dh];
                                for (j, &w) in prow.iter().enumerate() {
                                    if w == F::zero() {
                                        continue;
                                    }
                                    let dst = &mut dv.row_mut(b * nk + j)[h * dh..(h + 1) * dh];
                                    for (o, &x) in dst.iter_mut().zip(gs) {
                                        *o = *o + w * x;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        &Op::LogSoftmaxRows(a) => {
            if wants(a) {
                acc(grads, a, val(a), |da| {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let total: F = gr.iter().copied().sum();
                        let y = out.row(r);
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = *d + gr[c] - y[c].exp() * total;
                        }
                    }
                });
            }
        }
        Op::WeightedSum(a, w) => {
            let a = *a;
            if wants(a) {
                let s = g.data()[0];
                acc(grads, a, val(a), |da| {
                    for (d, &x) in da.data_mut().iter_mut().zip(w.data()) {
                        *d = *d + s * x;
                    }
                });
            }
        }
        Op::BceMean(p, t) => {
            let p = *p;
            if wants(p) {
                let pv = val(p);
                let s = g.data()[0] / F::of(pv.len() as f64);
                acc(grads, p, pv, |dp| {
                    for ((d, &x), &y) in dp.data_mut().iter_mut().zip(pv.data()).zip(t.data()) {
                        *d = *d - s * (y / x - (F::one() - y) / (F::one() - x));
                    }
                });
            }
        }
        &Op::SumAll(a) => {
            if wants(a) {
                let s = g.data()[0];
                acc(grads, a, val(a), |da| {
                    for d in da.data_mut() {
                        *d = *d + s;
                    }
                });
            }
        }
    }
}

fn unary_back<F: Real>(
    grads: &mut [Option<Tensor<F>>],
    a: usize,
    av: &Tensor<F>,
    g: &Tensor<F>,
    deriv: impl Fn(usize, F) -> F,
) {
    acc(grads, a, av, |da| {
        for (i, (d, (&x, &gi))) in da.data_mut().iter_mut().zip(av.data().iter().zip(g.data())).enumerate() {
            *d = *d + gi * deriv(i, x);
        }
    });
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

fn attn_probs_forward<F: Real>(q: &Tensor<F>, k: &Tensor<F>, s: &AttnShape) -> Tensor<F> {
    let d = q.cols();
    let dh = d / s.heads;
    let scale = F::of(s.scale);
    let mut out = Tensor::zeros(s.blocks * s.nq * s.heads, s.nk);
    let mut logits = vec![F::zero(); s.nk];
    for b in 0..s.blocks {
        let qbase = if s.shared_q { 0 } else { b * s.nq };
        for i in 0..s.nq {
            let qrow = q.row(qbase + i);
            let allowed = |j: usize| s.mask.as_ref().map_or(true, |m| m[i * s.nk + j]);
            for h in 0..s.heads {
                let qs = &qrow[h * dh..(h + 1) * dh];
                let mut max = F::neg_infinity();
                for (j, l) in logits.iter_mut().enumerate() {
                    if allowed(j) {
                        *l = scale * dot(qs, &k.row(b * s.nk + j)[h * dh..(h + 1) * dh]);
                        max = max.max(*l);
                    }
                }
                let row = out.row_mut((b * s.nq + i) * s.heads + h);
                let mut total = F::zero();
                for j in 0..s.nk {
                    if allowed(j) {
                        row[j] = (logits[j] - max).exp();
                        total = total + row[j];
                    }
                }
                for x in row.iter_mut() {
                    *x = *x / total;
                }
            }
        }
    }
    out
}

fn attn_probs_back<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Tensor<F>>],
    q: usize,
    k: usize,
    s: &AttnShape,
    probs: &Tensor<F>,
    g: &Tensor<F>,
) {
    let (qv, kv) = (&*nodes[q].value, &*nodes[k].value);
    let d = qv.cols();
    let dh = d / s.heads;
    let scale = F::of(s.scale);
    // dS = P * (dP - <P, dP>) per softmax row.
    let mut ds = Tensor::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let gp = g.row(r);
        let inner = dot(p, gp);
        for (j, o) in ds.row_mut(r).iter_mut().enumerate() {
            *o = p[j] * (gp[j] - inner);
        }
    }
    if nodes[q].needs_grad {
        acc(grads, q, qv, |dq| {
            for b in 0..s.blocks {
                let qbase = if s.shared_q { 0 } else { b * s.nq };
                for i in 0..s.nq {
                    for h in 0..s.heads {
                        let dsr = ds.row((b * s.nq + i) * s.heads + h);
                        let dst = &mut dq.row_mut(qbase + i)[h * dh..(h + 1) * dh];
                        for (j, &w) in dsr.iter().enumerate() {
                            if w == F::zero() {
                                continue;
                            }
                            let ks = &kv.row(b * s.nk + j)[h * dh..(h + 1) * dh];
                            for (o, &x) in dst.iter_mut().zip(ks) {
                                *o = *o + scale * w * x;
                            }
                        }
                    }
                }
            }
        });
    }
    if nodes[k].needs_grad {
        acc(grads, k, kv, |dk| {
            for b in 0..s.blocks {
                let qbase = if s.shared_q { 0 } else { b * s.nq };
                for i in 0..s.nq {
                    let qrow = qv.row(qbase + i);
                    for h in 0..s.heads {
                        let dsr = ds.row((b * s.nq + i) * s.heads + h);
                        let qs = &qrow[h * dh..(h + 1) * dh];
                        for (j, &w) in dsr.iter().enumerate() {
                            if w == F::zero() {
                                continue;
                            }
                            let dst = &mut dk.row_mut(b * s.nk + j)[h * dh..(h + 1) * dh];
                            for (o, &x) in dst.iter_mut().zip(qs) {
                                *o = *o + scale * w * x;
                            }
                        }
                    }
                }
            }
        });
    }
}

impl<'g, F: Real> Var<'g, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    /// Shared handle to this node's value.
    pub fn value(&self) -> Arc<Tensor<F>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self) -> F {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "scalar() on a non-scalar node");
        v.data()[0]
    }

    fn same_graph(&self, other: &Var<'g, F>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn unary(self, op: Op<F>, f: impl Fn(F) -> F) -> Self {
        let out = self.value().map(f);
        self.graph.push(out, op, &[self.id])
    }

    pub fn matmul(self, other: Self) -> Self {
        self.same_graph(&other);
        let out = self.value().matmul(&other.value());
        self.graph.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self @ other^T`.
    pub fn matmul_nt(self, other: Self) -> Self {
        self.same_graph(&other);
        let out = self.value().matmul_nt(&other.value());
        self.graph.push(out, Op::MatMulNt(self.id, other.id), &[self.id, other.id])
    }

    fn zip(self, other: Self, op: Op<F>, f: impl Fn(F, F) -> F) -> Self {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.graph.push(Tensor::from_vec(a.rows(), a.cols(), data), op, &[self.id, other.id])
    }

    pub fn add(self, other: Self) -> Self {
        self.zip(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Self) -> Self {
        self.zip(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Self) -> Self {
        self.zip(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    /// Add a `1 x cols` row to every row.
    pub fn add_row(self, row: Self) -> Self {
        self.same_graph(&row);
        let (a, r) = (self.value(), row.value());
        assert_eq!(r.shape(), (1, a.cols()), "add_row expects a 1 x cols row");
        let mut out = (*a).clone();
        for i in 0..out.rows() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = *o + x;
            }
        }
        self.graph.push(out, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    /// `mul * self + add`.
    pub fn affine(self, mul: f64, add: f64) -> Self {
        let (m, a) = (F::of(mul), F::of(add));
        self.unary(Op::Affine(self.id, m), |x| m * x + a)
    }

    pub fn scale(self, mul: f64) -> Self {
        self.affine(mul, 0.0)
    }

    /// Multiply by a `1 x 1` node.
    pub fn mul_scalar(self, s: Self) -> Self {
        self.same_graph(&s);
        let sv = s.scalar();
        let out = self.value().map(|x| x * sv);
        self.graph.push(out, Op::MulScalar(self.id, s.id), &[self.id, s.id])
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), F::exp)
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Log(self.id), F::ln)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), |x| F::one() / (F::one() + (-x).exp()))
    }

    pub fn gelu(self) -> Self {
        self.unary(Op::Gelu(self.id), gelu)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        let (l, h) = (F::of(lo), F::of(hi));
        self.unary(Op::Clamp(self.id, l, h), |x| x.max(l).min(h))
    }

    /// Row-wise layer normalization with `1 x cols` gain and bias.
    pub fn layer_norm(self, gamma: Self, beta: Self) -> Self {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let cols = x.cols();
        assert_eq!(gv.shape(), (1, cols));
        assert_eq!(bv.shape(), (1, cols));
        let n = F::of(cols as f64);
        let mut xhat = Tensor::zeros(x.rows(), cols);
        let mut out = Tensor::zeros(x.rows(), cols);
        let mut rstd = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd };
        self.graph.push(out, op, &[self.id, gamma.id, beta.id])
    }

    /// Scale every row to unit L2 norm. Zero rows produce non-finite output;
    /// callers validate norms first.
    pub fn l2_normalize_rows(self) -> Self {
        let x = self.value();
        let mut out = (*x).clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = x.row_norm(r);
            norms.push(n);
            for v in out.row_mut(r) {
                *v = *v / n;
            }
        }
        self.graph.push(out, Op::L2Normalize { x: self.id, norms }, &[self.id])
    }

    /// `out[r] = self[r] . other[r % other.rows]`, shape `rows x 1`.
    pub fn row_dot(self, other: Self) -> Self {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.cols(), b.cols());
        assert!(b.rows() > 0 && a.rows() % b.rows() == 0, "row_dot needs other.rows to divide self.rows");
        let data = (0..a.rows()).map(|r| dot(a.row(r), b.row(r % b.rows()))).collect();
        self.graph.push(Tensor::from_vec(a.rows(), 1, data), Op::RowDot(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(self) -> Self {
        let out = self.value().transpose();
        self.graph.push(out, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Self {
        let out = (*self.value()).clone().reshaped(rows, cols);
        self.graph.push(out, Op::Reshape(self.id), &[self.id])
    }

    pub fn gather_rows(self, idx: Vec<usize>) -> Self {
        let a = self.value();
        let mut out = Tensor::zeros(idx.len(), a.cols());
        for (r, &src) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(a.row(src));
        }
        self.graph.push(out, Op::GatherRows(self.id, Arc::new(idx)), &[self.id])
    }

    /// Rows `start..start + len` of every consecutive block of `block` rows.
    pub fn block_rows(self, block: usize, start: usize, len: usize) -> Self {
        let rows = self.shape().0;
        assert!(block > 0 && rows % block == 0 && start + len <= block);
        let idx = (0..rows / block).flat_map(|b| (start..start + len).map(move |i| b * block + i)).collect();
        self.gather_rows(idx)
    }

    /// Repeat the whole matrix `times` times along rows.
    pub fn tile_rows(self, times: usize) -> Self {
        let rows = self.shape().0;
        self.gather_rows((0..times).flat_map(|_| 0..rows).collect())
    }

    pub fn concat_rows(parts: &[Self]) -> Self {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        let mut data = Vec::new();
        for v in &values {
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rows = data.len() / cols.max(1);
        graph.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(ids.clone()), &ids)
    }

    /// Mean over consecutive blocks of `block` rows: `(B * block) x c -> B x c`.
    pub fn block_mean(self, block: usize) -> Self {
        let a = self.value();
        assert!(block > 0 && a.rows() % block == 0, "block_mean: rows not divisible by block");
        let blocks = a.rows() / block;
        let inv = F::one() / F::of(block as f64);
        let mut out = Tensor::zeros(blocks, a.cols());
        for r in 0..a.rows() {
            for (o, &x) in out.row_mut(r / block).iter_mut().zip(a.row(r)) {
                *o = *o + x;
            }
        }
        for v in out.data_mut() {
            *v = *v * inv;
        }
        self.graph.push(out, Op::BlockMean(self.id, block), &[self.id])
    }

    /// Per-block Gram matrix: `(B * n) x c -> (B * n) x n`, block `b` is `A_b A_b^T`.
    pub fn block_gram(self, block: usize) -> Self {
        let a = self.value();
        assert!(block > 0 && a.rows() % block == 0);
        let mut out = Tensor::zeros(a.rows(), block);
        for b in 0..a.rows() / block {
            for i in 0..block {
                for j in 0..block {
                    out.set(b * block + i, j, dot(a.row(b * block + i), a.row(b * block + j)));
                }
            }
        }
        self.graph.push(out, Op::BlockGram(self.id, block), &[self.id])
    }

    /// Post-softmax multi-head attention weights.
    ///
    /// `self` holds queries (`nq` rows, or `blocks * nq` rows), `keys` holds
    /// `blocks * nk` rows. The result has one row per (block, query, head),
    /// ordered with the head index fastest, and `nk` columns. Masked entries
    /// (`mask[i * nk + j] == false`) are exactly zero.
    #[allow(clippy::too_many_arguments)]
    pub fn attn_probs(
        self,
        keys: Self,
        heads: usize,
        blocks: usize,
        nq: usize,
        nk: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Self {
        self.same_graph(&keys);
        let (q, k) = (self.value(), keys.value());
        assert_eq!(q.cols(), k.cols(), "query/key width mismatch");
        assert!(heads > 0 && q.cols() % heads == 0, "heads must divide the attention width");
        assert_eq!(k.rows(), blocks * nk, "keys must have blocks * nk rows");
        let shared_q = q.rows() == nq && blocks != 1;
        assert!(shared_q || q.rows() == blocks * nq, "queries must have nq or blocks * nq rows");
        if let Some(m) = &mask {
            assert_eq!(m.len(), nq * nk, "mask must be nq x nk");
        }
        let dh = q.cols() / heads;
        let shape = AttnShape { heads, blocks, nq, nk, shared_q, scale: 1.0 / (dh as f64).sqrt(), mask };
        let out = attn_probs_forward(&q, &k, &shape);
        self.graph.push(out, Op::AttnProbs { q: self.id, k: keys.id, shape }, &[self.id, keys.id])
    }

    /// Apply attention weights from [`Var::attn_probs`] to `values`
    /// (`blocks * nk` rows), giving `blocks * nq` rows.
    pub fn attn_apply(self, values: Self, heads: usize, blocks: usize, nq: usize, nk: usize) -> Self {
        self.same_graph(&values);
        let (p, v) = (self.value(), values.value());
        assert_eq!(p.shape(), (blocks * nq * heads, nk));
        assert_eq!(v.rows(), blocks * nk);
        let d = v.cols();
        let dh = d / heads;
        let mut out = Tensor::zeros(blocks * nq, d);
        for b in 0..blocks {
            for i in 0..nq {
                let orow = out.row_mut(b * nq + i);
                for h in 0..heads {
                    let prow = p.row((b * nq + i) * heads + h);
                    let dst = &mut orow[h * dh..(h + 1) * dh];
                    for (j, &w) in prow.iter().enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        for (o, &x) in dst.iter_mut().zip(&v.row(b * nk + j)[h * dh..(h + 1) * dh]) {
                            *o = *o + w * x;
                        }
                    }
                }
            }
        }
        let op = Op::AttnApply { p: self.id, v: values.id, heads, blocks, nq, nk };
        self.graph.push(out, op, &[self.id, values.id])
    }

    pub fn log_softmax_rows(self) -> Self {
        let a = self.value();
        let mut out = (*a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        self.graph.push(out, Op::LogSoftmaxRows(self.id), &[self.id])
    }

    /// `sum(self * weights)` with constant weights.
    pub fn weighted_sum(self, weights: Tensor<F>) -> Self {
        let a = self.value();
        assert_eq!(a.shape(), weights.shape(), "weighted_sum shape mismatch");
        let s = dot(a.data(), weights.data());
        self.graph.push(Tensor::full(1, 1, s), Op::WeightedSum(self.id, Arc::new(weights)), &[self.id])
    }

    /// Mean binary cross-entropy against constant targets. Inputs must lie in (0, 1).
    pub fn bce_mean(self, target: Tensor<F>) -> Self {
        let p = self.value();
        assert_eq!(p.shape(), target.shape(), "bce target shape mismatch");
        let total: F = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| -(y * x.ln() + (F::one() - y) * (F::one() - x).ln()))
            .sum();
        let out = Tensor::full(1, 1, total / F::of(p.len() as f64));
        self.graph.push(out, Op::BceMean(self.id, Arc::new(target)), &[self.id])
    }

    pub fn sum_all(self) -> Self {
        let s = self.value().sum();
        self.graph.push(Tensor::full(1, 1, s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean_all(self) -> Self {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(f)/d(input) for a scalar-valued builder.
    fn check(inputs: Vec<Tensor<f64>>, f: impl for<'a> Fn(&[Var<'a, f64>]) -> Var<'a, f64>) {
        let eval = |vals: &[Tensor<f64>]| {
            let g = Graph::new();
            let vars: Vec<_> = vals.iter().map(|t| g.constant(t.clone())).collect();
            f(&vars).scalar()
        };
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&vars);
        let grads = g.backward(out);
        let h = 1e-5;
        for (n, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[n]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[n].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-6, "input {n} coord {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(3, 4, &mut rng), random(4, 2, &mut rng)], |v| v[0].matmul(v[1]).gelu().sum_all());
        check(vec![random(3, 4, &mut rng), random(5, 4, &mut rng)], |v| v[0].matmul_nt(v[1]).sigmoid().sum_all());
        check(vec![random(3, 4, &mut rng), random(3, 4, &mut rng)], |v| {
            v[0].mul(v[1]).sub(v[0]).add(v[1].exp()).sum_all()
        });
        check(vec![random(3, 4, &mut rng), random(1, 4, &mut rng)], |v| v[0].add_row(v[1]).gelu().mean_all());
        check(vec![random(3, 4, &mut rng), random(1, 1, &mut rng)], |v| v[0].mul_scalar(v[1]).exp().sum_all());
    }

    #[test]
    fn normalization_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(3, 5, &mut rng), random(1, 5, &mut rng), random(1, 5, &mut rng)], |v| {
            v[0].layer_norm(v[1], v[2]).gelu().sum_all()
        });
        let w = random(3, 5, &mut rng);
        check(vec![random(3, 5, &mut rng)], move |v| v[0].l2_normalize_rows().weighted_sum(w.clone()));
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(4, 3, &mut rng), random(2, 3, &mut rng)], |v| {
            let c = Var::concat_rows(&[v[0], v[1]]);
            let a = c.gather_rows(vec![5, 0, 0, 3]).transpose().reshape(6, 2).exp().sum_all();
            let b = c.block_rows(3, 1, 2).row_dot(v[1]).exp().sum_all();
            a.add(b)
        });
        let w2 = random(6, 3, &mut rng);
        check(vec![random(6, 4, &mut rng)], move |v| v[0].block_gram(3).weighted_sum(w2.clone()));
        check(vec![random(4, 3, &mut rng), random(2, 3, &mut rng)], |v| v[0].row_dot(v[1]).exp().sum_all());
        check(vec![random(4, 2, &mut rng)], |v| v[0].block_mean(2).exp().sum_all());
    }

    #[test]
    fn softmax_and_bce_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(3, 4, &mut rng);
        check(vec![random(3, 4, &mut rng)], move |v| v[0].log_softmax_rows().weighted_sum(w.clone()));
        let t = Tensor::from_f64(2, 2, &[1.0, 0.0, 0.3, 1.0]);
        check(vec![random(2, 2, &mut rng)], move |v| v[0].sigmoid().bce_mean(t.clone()));
        check(vec![random(2, 3, &mut rng)], |v| v[0].clamp(-0.5, 0.5).ln_safe_sum());
    }

    #[test]
    fn attention_grads_masked_and_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = Arc::new(vec![true, false, true, false, true, true, false, false, true]);
        let wp = random(2 * 3 * 2, 3, &mut rng);
        let m2 = mask.clone();
        check(vec![random(6, 4, &mut rng), random(6, 4, &mut rng)], move |v| {
            v[0].attn_probs(v[1], 2, 2, 3, 3, Some(m2.clone())).weighted_sum(wp.clone())
        });
        let wo = random(2 * 3, 4, &mut rng);
        check(vec![random(3, 4, &mut rng), random(4, 4, &mut rng), random(4, 4, &mut rng)], move |v| {
            let p = v[0].attn_probs(v[1], 2, 2, 3, 2, None);
            p.attn_apply(v[2], 2, 2, 3, 2).weighted_sum(wo.clone())
        });
    }

    #[test]
    fn masked_entries_are_exact_zeros() {
        let g = Graph::<f32>::new();
        let q = g.constant(Tensor::from_f64(2, 2, &[1.0, 2.0, -1.0, 0.5]));
        let k = g.constant(Tensor::from_f64(2, 2, &[0.3, 0.1, 4.0, 2.0]));
        let p = q.attn_probs(k, 1, 1, 2, 2, Some(Arc::new(vec![true, false, false, true]))).value();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(2, 2, 1.0));
        let b = g.param(Tensor::full(2, 2, 2.0));
        let grads = g.backward(a.mul(b).sum_all());
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0; 4]);
    }

    trait LnSafe<'g> {
        fn ln_safe_sum(self) -> Var<'g, f64>;
    }
    impl<'g> LnSafe<'g> for Var<'g, f64> {
        fn ln_safe_sum(self) -> Var<'g, f64> {
            self.affine(1.0, 2.0).ln().sum_all()
        }
    }
}
