//! The full recognizer: visual encoder (with or without mix tokens), prompt
//! text encoder, attribute-guided cross-attention (or a pooled-feature head),
//! and the losses tying them together.

use rand::Rng;

use crate::avfe::{attn_similarity, cosine_scores, Avfe, AvfeOut};
use crate::config::{Ablation, Config, LossWeights};
use crate::data::Image;
use crate::encoders::{image_to_tensor, patchify, prompts_for, PatchEmbed, TextEncoder, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{block_matrix, m2m_contrastive, racl_loss, sim_loss, total_loss, BlockMatrix, LossReport, LossTerms};
use crate::mgmt::{mix_similarity, MaskOptions, VisualEncoder};
use crate::nn::{Binder, Linear, ParamId, ParamStore};
use crate::schema::AttributeSchema;
use crate::tensor::{Real, Tensor};

/// Upper bound on the learned logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Debug)]
pub struct Focus {
    pub schema: AttributeSchema,
    pub vocab: Vocabulary,
    pub ablation: Ablation,
    pub patch: usize,
    /// Mix token count `K` (also the broadcast width without mix tokens).
    pub k: usize,
    pub tau_mix: f64,
    pub freeze_text: bool,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub avfe: Option<Avfe>,
    /// Pooled-feature projection used when cross-attention is off.
    pub vis_proj: Option<Linear>,
    pub logit_scale: ParamId,
    pub block: BlockMatrix,
}

/// Forward results for one batch and one query set.
pub struct Forward<'g, F: Real> {
    pub m_out: Var<'g, F>,
    /// `Q x D_t` text features.
    pub text: Var<'g, F>,
    /// `B x Q` cosine similarities.
    pub cosine: Var<'g, F>,
    /// `B x Q` cosine times the logit scale.
    pub scores: Var<'g, F>,
    pub avfe: Option<AvfeOut<'g, F>>,
}

impl Focus {
    /// Build the model and its freshly initialized parameters. Only the
    /// components switched on in `cfg.ablation` get parameters.
    pub fn new<F: Real>(cfg: &Config, schema: &AttributeSchema, rng: &mut impl Rng) -> Result<(Self, ParamStore<F>)> {
        cfg.validate()?;
        let m = &cfg.model;
        let ab = cfg.ablation;
        let (h, w) = (cfg.data.height, cfg.data.width);
        if h % m.patch != 0 || w % m.patch != 0 {
            return Err(Error::Config(format!("{h}x{w} images do not split into {0}x{0} patches", m.patch)));
        }
        let patches = (h / m.patch) * (w / m.patch);
        let vocab = Vocabulary::from_schema(schema);
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(&mut store, rng, m.patch, patches, m.dim);
        let opts = MaskOptions {
            mix_sees_mix: m.mix_sees_mix,
            patch_sees_mix: m.patch_sees_mix,
            global_subset_count: m.global_subset_count,
        };
        let visual = VisualEncoder::new(
            &mut store,
            rng,
            embed,
            m.global_tokens,
            m.subsets,
            ab.mgmt,
            opts,
            m.dim,
            m.vis_layers,
            m.vis_heads,
            m.mlp_ratio,
        )?;
        let prompts = if ab.rlp { m.prompts } else { 0 };
        let text = TextEncoder::new(
            &mut store,
            rng,
            vocab.len(),
            schema.len(),
            prompts,
            m.shared_prompts,
            m.text_dim,
            m.text_layers,
            m.text_heads,
            m.mlp_ratio,
        );
        let (avfe, vis_proj) = if ab.avfe {
            (Some(Avfe::new(&mut store, rng, m.text_dim, m.dim, m.cross_heads)), None)
        } else {
            (None, Some(Linear::new(&mut store, rng, "vis.proj", m.dim, m.text_dim, false)))
        };
        let logit_scale = store.add("logit_scale", Tensor::full(1, 1, F::of(m.logit_scale_init.ln())));
        let model = Self {
            schema: schema.clone(),
            vocab,
            ablation: ab,
            patch: m.patch,
            k: m.global_tokens + m.subsets,
            tau_mix: m.tau_mix,
            freeze_text: cfg.train.freeze_text,
            visual,
            text,
            avfe,
            vis_proj,
            logit_scale,
            block: block_matrix(schema),
        };
        Ok((model, store))
    }

    /// A binder that honours the frozen-text setting.
    pub fn binder<'g, 's, F: Real>(&self, graph: &'g Graph<F>, store: &'s ParamStore<F>) -> Binder<'g, 's, F> {
        let freeze = self.freeze_text;
        Binder::with_frozen(graph, store, move |n| freeze && n.starts_with("text."))
    }

    /// Prompts for `queries`; ids outside `seen` borrow region-mean prompts.
    pub fn prompts(&self, queries: &[usize], seen: &[usize]) -> Result<Vec<TokenSequence>> {
        prompts_for(&self.schema, queries, seen, &self.vocab)
    }

    /// `(B * S) x patch_dim` network input for a batch of images.
    pub fn input<F: Real>(&self, images: &[&Image]) -> Result<Tensor<F>> {
        let mut rows = 0;
        let mut data = Vec::new();
        for img in images {
            let p = patchify::<F>(&image_to_tensor(img), self.patch)?;
            if p.rows() != self.visual.embed.patches {
                return Err(Error::Shape(format!("image gives {} patches, model expects {}", p.rows(), self.visual.embed.patches)));
            }
            rows += p.rows();
            data.extend(p.into_vec());
        }
        let cols = self.patch * self.patch * 3;
        Ok(Tensor::from_vec(rows, cols, data))
    }

    pub fn logit_scale<'g, F: Real>(&self, p: &Binder<'g, '_, F>) -> Var<'g, F> {
        p.var(self.logit_scale).exp().clamp(0.0, MAX_LOGIT_SCALE)
    }

    pub fn forward<'g, F: Real>(&self, p: &Binder<'g, '_, F>, input: Var<'g, F>, prompts: &[TokenSequence]) -> Result<Forward<'g, F>> {
        let mix = self.visual.forward(p, input);
        check_finite(&mix.m_out, "mix token outputs")?;
        let text = self.text.forward(p, prompts)?;
        check_finite(&text, "text features")?;
        let (cosine, avfe) = match (&self.avfe, &self.vis_proj) {
            (Some(avfe), _) => {
                let out = avfe.forward(p, text, mix.m_out, self.k)?;
                (cosine_scores(out.v_t, text)?, Some(out))
            }
            (None, Some(proj)) => {
                let feat = proj.forward(p, mix.m_out.block_mean(self.k));
                let feat_n = feat.l2_normalize_rows();
                (feat_n.matmul_nt(text.l2_normalize_rows()), None)
            }
            (None, None) => unreachable!("model has neither cross-attention nor a pooled head"),
        };
        check_finite(&cosine, "similarity scores")?;
        let scores = cosine.mul_scalar(self.logit_scale(p));
        Ok(Forward { m_out: mix.m_out, text, cosine, scores, avfe })
    }

    /// Loss for a batch; `queries` are the attribute ids behind the columns of
    /// `labels` (already restricted to those ids).
    pub fn loss<'g, F: Real>(
        &self,
        fwd: &Forward<'g, F>,
        queries: &[usize],
        labels: &[Vec<u8>],
        weights: &LossWeights,
    ) -> Result<(Var<'g, F>, LossReport)> {
        let sim = if self.ablation.mgmt && weights.sim != 0.0 {
            Some(sim_loss(mix_similarity(fwd.m_out, self.k, self.tau_mix)?)?)
        } else {
            None
        };
        let racl = match &fwd.avfe {
            Some(out) if self.ablation.racl && weights.racl != 0.0 => {
                let s = attn_similarity(out.pooled, queries.len())?;
                Some(racl_loss(s, &self.block.select(queries))?)
            }
            _ => None,
        };
        let (v2t, t2v) = m2m_contrastive(fwd.scores, labels, 1.0)?;
        total_loss(&LossTerms { sim, racl, v2t, t2v }, weights)
    }
}

fn check_finite<F: Real>(v: &Var<'_, F>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {what}")))
    }
}

/// Inference helper: cosine scores (`B x Q`) for images against queries,
/// evaluated in chunks.
pub fn cosine_matrix<F: Real>(
    model: &Focus,
    store: &ParamStore<F>,
    images: &[&Image],
    queries: &[usize],
    seen: &[usize],
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let prompts = model.prompts(queries, seen)?;
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let g = Graph::new();
        let p = model.binder(&g, store);
        let fwd = model.forward(&p, p.input(model.input(part)?), &prompts)?;
        let c = fwd.cosine.value();
        out.extend((0..c.rows()).map(|r| c.row(r).iter().map(|x| x.f64()).collect::<Vec<f64>>()));
    }
    Ok(out)
}

/// Head-pooled cross-attention maps (`Q x K` per image) for images against
/// queries. Errors when cross-attention is switched off.
pub fn attention_maps<F: Real>(
    model: &Focus,
    store: &ParamStore<F>,
    images: &[&Image],
    queries: &[usize],
    seen: &[usize],
    chunk: usize,
) -> Result<Vec<Tensor<f64>>> {
    if model.avfe.is_none() {
        return Err(Error::Invalid("attention maps need the cross-attention component".into()));
    }
    let prompts = model.prompts(queries, seen)?;
    let q = queries.len();
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let g = Graph::new();
        let p = model.binder(&g, store);
        let fwd = model.forward(&p, p.input(model.input(part)?), &prompts)?;
        let pooled = fwd.avfe.expect("cross-attention present").pooled.value();
        for b in 0..part.len() {
            let data = pooled.data()[b * q * model.k..(b + 1) * q * model.k].iter().map(|x| x.f64()).collect();
            out.push(Tensor::from_vec(q, model.k, data));
        }
    }
    Ok(out)
}
