//! Training objectives: mix-token dissimilarity, region-aware contrastive
//! loss over attention maps, and the two many-to-many contrastive terms.

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::schema::AttributeSchema;
use crate::tensor::{Real, Tensor};

/// `Z x Z`, entry `(i, j)` set iff attributes `i` and `j` share a region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMatrix {
    pub z: usize,
    pub data: Vec<bool>,
}

impl BlockMatrix {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.z + j]
    }

    /// Restriction to the given attribute ids, as a float target matrix.
    pub fn select<F: Real>(&self, ids: &[usize]) -> Tensor<F> {
        let n = ids.len();
        let mut t = Tensor::zeros(n, n);
        for (a, &i) in ids.iter().enumerate() {
            for (b, &j) in ids.iter().enumerate() {
                if self.get(i, j) {
                    t.set(a, b, F::one());
                }
            }
        }
        t
    }
}

pub fn block_matrix(schema: &AttributeSchema) -> BlockMatrix {
    let z = schema.len();
    let data = (0..z * z).map(|n| schema.attr(n / z).region_idx == schema.attr(n % z).region_idx).collect();
    BlockMatrix { z, data }
}

fn check_range<F: Real>(s: &Var<'_, F>, what: &str) -> Result<()> {
    if s.value().data().iter().any(|&x| !(x > F::zero() && x < F::one())) {
        return Err(Error::Numerical(format!("{what} has entries outside (0, 1)")));
    }
    Ok(())
}

/// BCE between stacked `(B * K) x K` mix similarities and the identity.
pub fn sim_loss<'g, F: Real>(s_mix: Var<'g, F>) -> Result<Var<'g, F>> {
    check_range(&s_mix, "mix similarity")?;
    let (rows, k) = s_mix.shape();
    let target = tile(&Tensor::identity(k), rows / k);
    Ok(s_mix.bce_mean(target))
}

/// BCE between stacked `(B * Q) x Q` attention similarities and the block
/// matrix restricted to the queried attributes.
pub fn racl_loss<'g, F: Real>(s_attn: Var<'g, F>, block: &Tensor<F>) -> Result<Var<'g, F>> {
    check_range(&s_attn, "attention similarity")?;
    let (rows, q) = s_attn.shape();
    if block.shape() != (q, q) {
        return Err(Error::Shape(format!("block matrix is {:?}, similarity blocks are {q}x{q}", block.shape())));
    }
    Ok(s_attn.bce_mean(tile(block, rows / q)))
}

fn tile<F: Real>(t: &Tensor<F>, times: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(t.len() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(t.rows() * times, t.cols(), data)
}

/// Multi-positive InfoNCE in both directions over a `B x Q` score matrix.
///
/// Returns `(v2t, t2v)`. Images (rows) or attributes (columns) without any
/// positive contribute nothing; if no row has a positive at all the term is
/// zero.
pub fn m2m_contrastive<'g, F: Real>(scores: Var<'g, F>, labels: &[Vec<u8>], tau: f64) -> Result<(Var<'g, F>, Var<'g, F>)> {
    let (b, q) = scores.shape();
    if labels.len() != b || labels.iter().any(|l| l.len() != q) {
        return Err(Error::Shape(format!("labels do not match the {b}x{q} score matrix")));
    }
    let s = scores.scale(1.0 / tau);
    let weights = |rows: usize, cols: usize, pos: &dyn Fn(usize, usize) -> bool| {
        let counts: Vec<usize> = (0..rows).map(|r| (0..cols).filter(|&c| pos(r, c)).count()).collect();
        let active = counts.iter().filter(|&&n| n > 0).count();
        let mut w = Tensor::<F>::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if pos(r, c) {
                    w.set(r, c, F::of(-1.0 / (counts[r] * active) as f64));
                }
            }
        }
        w
    };
    let v2t = s.log_softmax_rows().weighted_sum(weights(b, q, &|i, j| labels[i][j] == 1));
    let t2v = s.transpose().log_softmax_rows().weighted_sum(weights(q, b, &|j, i| labels[i][j] == 1));
    Ok((v2t, t2v))
}

/// The loss terms of one batch. Absent terms belong to disabled components.
pub struct LossTerms<'g, F: Real> {
    pub sim: Option<Var<'g, F>>,
    pub racl: Option<Var<'g, F>>,
    pub v2t: Var<'g, F>,
    pub t2v: Var<'g, F>,
}

/// Scalar values of one batch's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub sim: f64,
    pub racl: f64,
    pub v2t: f64,
    pub t2v: f64,
    pub total: f64,
}

/// Weighted sum of the present terms.
pub fn total_loss<'g, F: Real>(terms: &LossTerms<'g, F>, w: &LossWeights) -> Result<(Var<'g, F>, LossReport)> {
    let parts = [(terms.sim, w.sim), (terms.racl, w.racl), (Some(terms.v2t), w.v2t), (Some(terms.t2v), w.t2v)];
    let vals: Vec<f64> = parts.iter().map(|(v, _)| v.map_or(0.0, |v| v.scalar().f64())).collect();
    let names = ["sim", "racl", "v2t", "t2v"];
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("loss term {} is {}", names[i], vals[i])));
    }
    let mut total: Option<Var<'g, F>> = None;
    for (v, weight) in parts {
        if let (Some(v), true) = (v, weight != 0.0) {
            let term = v.scale(weight);
            total = Some(match total {
                Some(t) => t.add(term),
                None => term,
            });
        }
    }
    let total = total.unwrap_or_else(|| terms.v2t.scale(0.0));
    let report = LossReport {
        sim: vals[0],
        racl: vals[1],
        v2t: vals[2],
        t2v: vals[3],
        total: total.scalar().f64(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn m2m_hand_values() {
        let g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(1, 2, &[10.0, -10.0]));
        let (v2t, _) = m2m_contrastive(s, &[vec![1, 0]], 1.0).unwrap();
        assert!((v2t.scalar() - (1.0 + (-20f64).exp()).ln()).abs() < 1e-15);
        let s = g.constant(Tensor::from_f64(1, 3, &[0.5, 0.5, 0.5]));
        let (v2t, _) = m2m_contrastive(s, &[vec![0, 1, 0]], 1.0).unwrap();
        assert!((v2t.scalar() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let g = Graph::<f64>::new();
        let c = |x| g.constant(Tensor::full(1, 1, x));
        let terms = LossTerms { sim: Some(c(0.1)), racl: Some(c(0.2)), v2t: c(0.3), t2v: c(0.4) };
        let (_, r) = total_loss(&terms, &LossWeights::default()).unwrap();
        assert!((r.total - 1.0).abs() < 1e-12);
        let zero = LossWeights { sim: 0.0, racl: 0.0, v2t: 0.0, t2v: 0.0 };
        assert_eq!(total_loss(&terms, &zero).unwrap().1.total, 0.0);
        let bad = LossTerms { sim: Some(c(f64::NAN)), racl: None, v2t: c(0.3), t2v: c(0.4) };
        assert!(total_loss(&bad, &LossWeights::default()).unwrap_err().is_numerical());
    }
}
