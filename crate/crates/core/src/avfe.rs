//! Attribute-guided visual feature extraction: attribute text features query
//! the mix tokens through one multi-head cross-attention layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::mgmt::EPS;
use crate::nn::{Attention, Binder, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct Avfe {
    pub attn: Attention,
}

/// Cross-attention outputs for `B` images and `Q` attribute queries.
pub struct AvfeOut<'g, F: Real> {
    /// `(B * Q) x D_t` attribute-level visual features.
    pub v_t: Var<'g, F>,
    /// `(B * Q * h) x K` post-softmax weights, head index fastest.
    pub probs: Var<'g, F>,
    /// `(B * Q) x K` head-averaged weights.
    pub pooled: Var<'g, F>,
}

impl Avfe {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut impl Rng, text_dim: usize, dim: usize, heads: usize) -> Self {
        Self { attn: Attention::new(store, rng, "avfe", text_dim, dim, text_dim, text_dim, heads) }
    }

    /// `t` is `Q x D_t` (shared by every image), `m_out` is `(B * K) x D`.
    pub fn forward<'g, F: Real>(&self, p: &Binder<'g, '_, F>, t: Var<'g, F>, m_out: Var<'g, F>, k: usize) -> Result<AvfeOut<'g, F>> {
        let (q, _) = t.shape();
        if k == 0 || m_out.shape().0 % k != 0 {
            return Err(Error::Shape(format!("{} mix rows is not a multiple of K = {k}", m_out.shape().0)));
        }
        let b = m_out.shape().0 / k;
        let out = self.attn.forward(p, t, m_out, b, q, k, None);
        let pooled = out.probs.block_mean(self.attn.heads);
        Ok(AvfeOut { v_t: out.out, probs: out.probs, pooled })
    }
}

/// Per image `Q x Q` cosine similarity of pooled attention rows, clamped to
/// `[eps, 1 - eps]`, stacked to `(B * Q) x Q`.
pub fn attn_similarity<'g, F: Real>(pooled: Var<'g, F>, q: usize) -> Result<Var<'g, F>> {
    let v = pooled.value();
    if let Some(r) = (0..v.rows()).find(|&r| v.row_norm(r) == F::zero()) {
        return Err(Error::Numerical(format!("attention row {r} is all zero")));
    }
    Ok(pooled.l2_normalize_rows().block_gram(q).clamp(EPS, 1.0 - EPS))
}

/// Row-wise cosine between `(B * Q) x D_t` visual features and the `Q x D_t`
/// text features, reshaped to `B x Q`.
pub fn cosine_scores<'g, F: Real>(v_t: Var<'g, F>, t: Var<'g, F>) -> Result<Var<'g, F>> {
    let q = t.shape().0;
    for (name, m) in [("visual", v_t.value()), ("text", t.value())] {
        if let Some(r) = (0..m.rows()).find(|&r| m.row_norm(r) == F::zero()) {
            return Err(Error::Numerical(format!("{name} feature row {r} has zero norm")));
        }
    }
    let b = v_t.shape().0 / q;
    Ok(v_t.l2_normalize_rows().row_dot(t.l2_normalize_rows()).reshape(b, q))
}

/// `B x Q` prediction scores: cosine times the logit scale (`1 x 1`).
pub fn predict_scores<'g, F: Real>(v_t: Var<'g, F>, t: Var<'g, F>, logit_scale: Var<'g, F>) -> Result<Var<'g, F>> {
    Ok(cosine_scores(v_t, t)?.mul_scalar(logit_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::normal;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let avfe = Avfe::new(&mut store, &mut rng, 8, 12, 2);
        let g = Graph::new();
        let p = Binder::new(&g, &store);
        let t = p.input(normal(&mut rng, 5, 8, 1.0));
        let m = p.input(normal(&mut rng, 1, 12, 1.0));
        let out = avfe.forward(&p, t, m, 1).unwrap();
        assert!(out.probs.value().data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
        // every query gets the output-projected value of the single token
        let v = out.v_t.value();
        for r in 1..5 {
            for c in 0..8 {
                assert!((v.get(r, c) - v.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_of_pooled_maps() {
        let g = Graph::<f64>::new();
        let pooled = g.constant(Tensor::from_f64(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0]));
        let s = attn_similarity(pooled, 3).unwrap().value();
        assert!((s.get(0, 0) - (1.0 - EPS)).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((s.get(0, 2) - EPS).abs() < 1e-15);
    }

    #[test]
    fn colinear_and_orthogonal_scores() {
        let g = Graph::<f64>::new();
        let t = g.constant(Tensor::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(Tensor::from_f64(4, 2, &[3.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0, -1.0]));
        let scale = g.constant(Tensor::full(1, 1, 10.0));
        let s = predict_scores(v, t, scale).unwrap().value();
        assert_eq!(s.shape(), (2, 2));
        assert_eq!(s.data(), &[10.0, 0.0, 10.0, -10.0]);
    }
}
