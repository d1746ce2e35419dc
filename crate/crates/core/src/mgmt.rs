//! Multi-granularity mix tokens.
//!
//! Global mix tokens attend over every patch, local mix token `i` over the
//! patches of subset `i` only. Mix tokens are prepended to the patch sequence
//! and share the visual transformer blocks; the boolean mask enforces who may
//! attend to whom.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::encoders::{PatchEmbed, TOKEN_STD};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{normal, Binder, Block, LayerNorm, ParamId, ParamStore};
use crate::tensor::Real;

/// Split `0..s` into `r` contiguous ranges whose sizes differ by at most one,
/// larger ranges first.
pub fn partition_patches(s: usize, r: usize) -> Result<Vec<Range<usize>>> {
    if r == 0 || r > s {
        return Err(Error::Invalid(format!("cannot split {s} patches into {r} subsets")));
    }
    let (base, extra) = (s / r, s % r);
    let mut start = 0;
    Ok((0..r)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskOptions {
    pub mix_sees_mix: bool,
    pub patch_sees_mix: bool,
    /// Global tokens see only this many leading subsets.
    pub global_subset_count: Option<usize>,
}

/// Square boolean mask over `[global mix; local mix; patches]`. `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    pub allowed: Arc<Vec<bool>>,
}

impl AttentionMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.n + col]
    }
}

pub fn build_attention_mask(
    k_g: usize,
    k_l: usize,
    s: usize,
    partition: &[Range<usize>],
    opts: MaskOptions,
) -> Result<AttentionMask> {
    if partition.len() != k_l {
        return Err(Error::Invalid(format!("{k_l} local mix tokens but {} patch subsets", partition.len())));
    }
    if partition.iter().any(|r| r.end > s) {
        return Err(Error::Invalid("patch subset exceeds the patch count".into()));
    }
    let k = k_g + k_l;
    let n = k + s;
    let global_cols: Vec<usize> = match opts.global_subset_count {
        None => (0..s).collect(),
        Some(c) if c >= 1 && c <= partition.len() => partition[..c].iter().flat_map(|r| r.clone()).collect(),
        Some(c) => return Err(Error::Invalid(format!("global subset count {c} out of range"))),
    };
    let mut allowed = vec![false; n * n];
    let mut set = |r: usize, c: usize| allowed[r * n + c] = true;
    for g in 0..k_g {
        for &c in &global_cols {
            set(g, k + c);
        }
    }
    for (i, range) in partition.iter().enumerate() {
        for c in range.clone() {
            set(k_g + i, k + c);
        }
    }
    for r in k..n {
        for c in k..n {
            set(r, c);
        }
    }
    if opts.mix_sees_mix {
        for r in 0..k {
            for c in 0..k {
                set(r, c);
            }
        }
    }
    if opts.patch_sees_mix {
        for r in k..n {
            for c in 0..k {
                set(r, c);
            }
        }
    }
    let mask = AttentionMask { n, allowed: Arc::new(allowed) };
    if let Some(r) = (0..n).find(|&r| !(0..n).any(|c| mask.get(r, c))) {
        return Err(Error::Invalid(format!("mask row {r} attends to nothing")));
    }
    Ok(mask)
}

/// Visual transformer. With mix tokens it runs the masked MGMT stack; without
/// them it is a plain ViT whose mean-pooled patch feature stands in for every
/// mix token.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub embed: PatchEmbed,
    pub mix: Option<ParamId>,
    pub k: usize,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
    pub mask: Option<AttentionMask>,
}

/// Visual encoder outputs for a batch.
pub struct MixOut<'g, F: Real> {
    /// `(B * K) x D`, the first `K` rows of every image.
    pub m_out: Var<'g, F>,
    /// `(B * S) x D` patch tokens after the last block.
    pub patches: Var<'g, F>,
}

impl VisualEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        embed: PatchEmbed,
        k_g: usize,
        k_l: usize,
        with_mix: bool,
        opts: MaskOptions,
        dim: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let s = embed.patches;
        let (mix, mask) = if with_mix {
            let partition = partition_patches(s, k_l)?;
            let mask = build_attention_mask(k_g, k_l, s, &partition, opts)?;
            (Some(store.add("mgmt.mix", normal(rng, k_g + k_l, dim, TOKEN_STD))), Some(mask))
        } else {
            (None, None)
        };
        let blocks = (0..layers).map(|l| Block::new(store, rng, &format!("vis.l{l}"), dim, heads, mlp_ratio)).collect();
        let ln = LayerNorm::new(store, "vis.ln", dim);
        Ok(Self { embed, mix, k: k_g + k_l, blocks, ln, mask })
    }

    /// Run the stack on already-embedded patch tokens (`(B * S) x D`).
    pub fn forward_tokens<'g, F: Real>(&self, p: &Binder<'g, '_, F>, tokens: Var<'g, F>) -> MixOut<'g, F> {
        let s = self.embed.patches;
        let b = tokens.shape().0 / s;
        let k = self.k;
        let Some(mix_id) = self.mix else {
            let mut x = tokens;
            for blk in &self.blocks {
                x = blk.forward(p, x, b, s, None).out;
            }
            let x = self.ln.forward(p, x);
            let pooled = x.block_mean(s);
            let m_out = pooled.gather_rows((0..b).flat_map(|i| std::iter::repeat(i).take(k)).collect());
            return MixOut { m_out, patches: x };
        };
        let n = k + s;
        let mix = p.var(mix_id).tile_rows(b);
        // image i = its K mix rows, then its S patch rows
        let order = (0..b).flat_map(|i| (0..n).map(move |t| if t < k { i * k + t } else { b * k + i * s + (t - k) })).collect();
        let mut x = Var::concat_rows(&[mix, tokens]).gather_rows(order);
        let mask = self.mask.as_ref().map(|m| m.allowed.clone());
        for blk in &self.blocks {
            x = blk.forward(p, x, b, n, mask.clone()).out;
        }
        let x = self.ln.forward(p, x);
        MixOut { m_out: x.block_rows(n, 0, k), patches: x.block_rows(n, k, s) }
    }

    /// Embed raw patches (`(B * S) x patch_dim`) and run the stack.
    pub fn forward<'g, F: Real>(&self, p: &Binder<'g, '_, F>, raw: Var<'g, F>) -> MixOut<'g, F> {
        let tokens = self.embed.forward(p, raw);
        self.forward_tokens(p, tokens)
    }
}

/// Per image `K x K` block of `clamp(sigmoid(cos(m_i, m_j) / tau), eps, 1 - eps)`,
/// stacked to `(B * K) x K`.
pub fn mix_similarity<'g, F: Real>(m_out: Var<'g, F>, k: usize, tau: f64) -> Result<Var<'g, F>> {
    let v = m_out.value();
    if let Some(r) = (0..v.rows()).find(|&r| v.row_norm(r) == F::zero()) {
        return Err(Error::Numerical(format!("mix token row {r} has zero norm")));
    }
    Ok(m_out.l2_normalize_rows().block_gram(k).scale(1.0 / tau).sigmoid().clamp(EPS, 1.0 - EPS))
}

/// Clamp used by both similarity-matrix BCE losses.
pub const EPS: f64 = 1e-6;
