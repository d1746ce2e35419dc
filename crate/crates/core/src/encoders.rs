//! Patch embedding for images and a small transformer text encoder for
//! attribute prompts.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{normal, Binder, Block, LayerNorm, Linear, ParamId, ParamStore};
use crate::schema::{AttributeDef, AttributeSchema};
use crate::tensor::{Real, Tensor};

/// Words every prompt template uses besides the attribute's own three.
pub const TEMPLATE_WORDS: [&str; 5] = ["a", "feature", "of", "is", "."];

/// Template length in tokens: `a {region} feature of {category} is {value} .`
pub const TEMPLATE_LEN: usize = 8;

const INIT_STD: f64 = 0.02;

/// Tables that feed a layer norm directly start at unit scale.
pub(crate) const TOKEN_STD: f64 = 1.0;

/// Pixels scaled to `[-1, 1]`, laid out as `H x (W * 3)`.
pub fn image_to_tensor<F: Real>(img: &Image) -> Tensor<F> {
    let data = img.pixels.iter().map(|&p| F::of((f64::from(p) / 255.0 - 0.5) / 0.5)).collect();
    Tensor::from_vec(img.height, img.width * 3, data)
}

/// Cut an `H x (W * 3)` image tensor into non-overlapping `patch x patch`
/// tiles, row-major, one flattened tile (row, column, channel) per output row.
pub fn patchify<F: Real>(x: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    let (h, w3) = x.shape();
    let w = w3 / 3;
    if patch == 0 || w3 % 3 != 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible into {patch}x{patch} patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let mut out = Tensor::zeros(ph * pw, dim);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            for dy in 0..patch {
                let src = &x.row(py * patch + dy)[px * patch * 3..(px + 1) * patch * 3];
                row[dy * patch * 3..(dy + 1) * patch * 3].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Linear patch projection plus learned positional embedding.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patches: usize,
}

impl PatchEmbed {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut impl Rng, patch: usize, patches: usize, dim: usize) -> Self {
        Self {
            proj: Linear::new(store, rng, "vis.patch", patch * patch * 3, dim, true),
            pos: store.add("vis.pos", normal(rng, patches, dim, INIT_STD)),
            patches,
        }
    }

    /// `(B * S) x patch_dim` raw patches to `(B * S) x D` tokens.
    pub fn forward<'g, F: Real>(&self, p: &Binder<'g, '_, F>, patches: Var<'g, F>) -> Var<'g, F> {
        let b = patches.shape().0 / self.patches;
        self.proj.forward(p, patches).add(p.var(self.pos).tile_rows(b))
    }
}

/// Word table for prompt templates. Index = position in the list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("vocabulary word `{w}` must be one non-empty token")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Invalid(format!("vocabulary word `{w}` appears twice")));
            }
        }
        Ok(Self { words, index })
    }

    /// Template words followed by schema words, skipping repeats.
    pub fn from_schema(schema: &AttributeSchema) -> Self {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        for w in schema.words() {
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Self::new(words).expect("schema words are validated single tokens")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::Invalid(format!("word `{word}` is not in the vocabulary")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }
}

/// Where the learnable block of a prompt comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptSource {
    /// The attribute's own block in the bank.
    Own(usize),
    /// Element-wise mean of these attributes' blocks.
    Mean(Vec<usize>),
}

/// A prompt before embedding: learnable block reference plus word ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub prompt: PromptSource,
    pub words: Vec<usize>,
}

pub fn template(attr: &AttributeDef) -> [&str; TEMPLATE_LEN] {
    ["a", &attr.region, "feature", "of", &attr.category, "is", &attr.value, "."]
}

fn template_ids(attr: &AttributeDef, vocab: &Vocabulary) -> Result<Vec<usize>> {
    template(attr).iter().map(|w| vocab.id(w)).collect()
}

/// Prompt for an attribute that has its own learnable block.
pub fn build_prompt(attr: &AttributeDef, vocab: &Vocabulary) -> Result<TokenSequence> {
    Ok(TokenSequence { prompt: PromptSource::Own(attr.id), words: template_ids(attr, vocab)? })
}

/// Prompt for an unseen attribute: its block is the mean of the seen
/// attributes' blocks in the same region.
pub fn unseen_prompt(attr: &AttributeDef, schema: &AttributeSchema, seen: &[usize], vocab: &Vocabulary) -> Result<TokenSequence> {
    let donors: Vec<usize> =
        seen.iter().copied().filter(|&i| i != attr.id && schema.attr(i).region_idx == attr.region_idx).collect();
    if donors.is_empty() {
        return Err(Error::Invalid(format!("region {} has no seen attribute to borrow prompts from", attr.region)));
    }
    Ok(TokenSequence { prompt: PromptSource::Mean(donors), words: template_ids(attr, vocab)? })
}

/// Prompts for `queries`, routing anything outside `seen` through [`unseen_prompt`].
pub fn prompts_for(schema: &AttributeSchema, queries: &[usize], seen: &[usize], vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    queries
        .iter()
        .map(|&q| {
            let attr = schema.attr(q);
            if seen.contains(&q) {
                build_prompt(attr, vocab)
            } else {
                unseen_prompt(attr, schema, seen, vocab)
            }
        })
        .collect()
}

/// Materialize a prompt's learnable block from a bank of `Z * m` (or `m`
/// when shared) rows.
pub fn prompt_block<F: Real>(source: &PromptSource, bank: &Tensor<F>, m: usize) -> Tensor<F> {
    let weights = block_weights(source, bank.rows() / m.max(1));
    let mut out = Tensor::zeros(m, bank.cols());
    for (blk, w) in weights {
        for r in 0..m {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bank.row(blk * m + r)) {
                *o = *o + F::of(w) * x;
            }
        }
    }
    out
}

fn block_weights(source: &PromptSource, blocks: usize) -> Vec<(usize, f64)> {
    if blocks == 1 {
        return vec![(0, 1.0)];
    }
    match source {
        PromptSource::Own(i) => vec![(*i, 1.0)],
        PromptSource::Mean(ids) => ids.iter().map(|&i| (i, 1.0 / ids.len() as f64)).collect(),
    }
}

/// Transformer over prompt sequences, pooled at the last token.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tok: ParamId,
    pub pos: ParamId,
    /// `None` when there are no learnable prompt vectors.
    pub bank: Option<ParamId>,
    pub prompts: usize,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
    pub proj: Linear,
}

impl TextEncoder {
    /// `prompts` learnable vectors per attribute (`shared` = one block for all).
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        vocab: usize,
        attributes: usize,
        prompts: usize,
        shared: bool,
        dim: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let tok = store.add("text.tok", normal(rng, vocab, dim, TOKEN_STD));
        let pos = store.add("text.pos", normal(rng, prompts + TEMPLATE_LEN, dim, TOKEN_STD));
        let bank_rows = if shared { prompts } else { attributes * prompts };
        let bank = (prompts > 0).then(|| store.add("prompt.bank", normal(rng, bank_rows, dim, TOKEN_STD)));
        let blocks = (0..layers).map(|l| Block::new(store, rng, &format!("text.l{l}"), dim, heads, mlp_ratio)).collect();
        let ln = LayerNorm::new(store, "text.ln", dim);
        let proj = Linear::new(store, rng, "text.proj", dim, dim, false);
        Self { tok, pos, bank, prompts, blocks, ln, proj }
    }

    pub fn seq_len(&self) -> usize {
        self.prompts + TEMPLATE_LEN
    }

    /// Embedded input rows, `(Q * seq_len) x D_t`, before position embedding.
    fn embed<'g, F: Real>(&self, p: &Binder<'g, '_, F>, seqs: &[TokenSequence]) -> Result<Var<'g, F>> {
        let n = self.seq_len();
        for s in seqs {
            if s.words.len() != TEMPLATE_LEN {
                return Err(Error::Shape(format!("prompt has {} words, expected {TEMPLATE_LEN}", s.words.len())));
            }
        }
        let q = seqs.len();
        let words = p.var(self.tok).gather_rows(seqs.iter().flat_map(|s| s.words.iter().copied()).collect());
        let Some(bank_id) = self.bank else {
            return Ok(words);
        };
        let bank = p.var(bank_id);
        let m = self.prompts;
        let blocks = bank.shape().0 / m;
        // prompt rows = A @ bank, where A routes (and averages) bank blocks
        let mut a = Tensor::<F>::zeros(q * m, bank.shape().0);
        for (j, s) in seqs.iter().enumerate() {
            for (blk, w) in block_weights(&s.prompt, blocks) {
                if blk >= blocks {
                    return Err(Error::Invalid(format!("prompt block {blk} out of range")));
                }
                for r in 0..m {
                    a.set(j * m + r, blk * m + r, F::of(w));
                }
            }
        }
        let prompts = p.input(a).matmul(bank);
        // interleave: query j = its m prompt rows then its template rows
        let order = (0..q)
            .flat_map(|j| (0..n).map(move |t| if t < m { j * m + t } else { q * m + j * TEMPLATE_LEN + (t - m) }))
            .collect();
        Ok(Var::concat_rows(&[prompts, words]).gather_rows(order))
    }

    /// Encode a batch of prompts into `Q x D_t` features.
    pub fn forward<'g, F: Real>(&self, p: &Binder<'g, '_, F>, seqs: &[TokenSequence]) -> Result<Var<'g, F>> {
        if seqs.is_empty() {
            return Err(Error::Invalid("no prompts to encode".into()));
        }
        let n = self.seq_len();
        let q = seqs.len();
        let mut x = self.embed(p, seqs)?.add(p.var(self.pos).tile_rows(q));
        for blk in &self.blocks {
            x = blk.forward(p, x, q, n, None).out;
        }
        let last = x.block_rows(n, n - 1, 1);
        Ok(self.proj.forward(p, self.ln.forward(p, last)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::graph::Graph;
    use crate::schema::{build_schema, split_open_domain};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize) -> (AttributeSchema, Vocabulary, ParamStore<f64>, TextEncoder) {
        let schema = build_schema(&DataConfig::default()).unwrap();
        let vocab = Vocabulary::from_schema(&schema);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(&mut store, &mut rng, vocab.len(), schema.len(), m, false, 16, 2, 2, 2);
        (schema, vocab, store, enc)
    }

    #[test]
    fn patch_geometry() {
        let x = Tensor::<f32>::zeros(64, 96);
        assert_eq!(patchify(&x, 8).unwrap().shape(), (32, 192));
        assert!(patchify(&x, 7).is_err());
    }

    #[test]
    fn patch_contents_are_row_major_tiles() {
        let img = Tensor::<f64>::from_vec(4, 12, (0..48).map(f64::from).collect());
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), (4, 12));
        // patch 1 is the top-right tile: rows 0-1, columns 2-3
        assert_eq!(&p.row(1)[..6], &img.row(0)[6..12]);
        assert_eq!(&p.row(1)[6..], &img.row(1)[6..12]);
        assert_eq!(&p.row(2)[..6], &img.row(2)[..6]);
    }

    #[test]
    fn template_lengths() {
        let (schema, vocab, ..) = setup(4);
        let s = build_prompt(schema.attr(1), &vocab).unwrap();
        assert_eq!(s.words.len(), TEMPLATE_LEN);
        let a = build_prompt(schema.attr(0), &vocab).unwrap();
        let diff: Vec<usize> = (0..TEMPLATE_LEN).filter(|&i| a.words[i] != s.words[i]).collect();
        assert_eq!(diff, vec![6]);
    }

    #[test]
    fn vocabulary_round_trip() {
        let (_, vocab, ..) = setup(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
        assert!(vocab.id("T-shirt").is_err());
    }

    #[test]
    fn unseen_block_is_mean_of_region() {
        let (schema, vocab, store, enc) = setup(3);
        let (seen, unseen) = split_open_domain(&schema, 1).unwrap();
        let s = unseen_prompt(schema.attr(unseen[0]), &schema, &seen, &vocab).unwrap();
        let bank = store.get(enc.bank.unwrap());
        let got = prompt_block(&s.prompt, bank, 3);
        let donors: Vec<usize> = seen.iter().copied().filter(|&i| schema.attr(i).region_idx == 0).collect();
        for r in 0..3 {
            for c in 0..16 {
                let want = donors.iter().map(|&d| bank.get(d * 3 + r, c)).sum::<f64>() / donors.len() as f64;
                assert!((got.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_rows_are_independent_and_position_sensitive() {
        let (schema, vocab, store, enc) = setup(2);
        let g = Graph::new();
        let p = Binder::new(&g, &store);
        let all: Vec<usize> = (0..schema.len()).collect();
        let seqs = prompts_for(&schema, &all, &all, &vocab).unwrap();
        let batch = enc.forward(&p, &seqs).unwrap().value();
        let single = enc.forward(&p, &seqs[3..4]).unwrap().value();
        assert_eq!(batch.shape(), (18, 16));
        for (a, b) in batch.row(3).iter().zip(single.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut swapped = seqs[3].clone();
        swapped.words.swap(1, 4);
        let other = enc.forward(&p, &[swapped]).unwrap().value();
        assert!(other.row(0).iter().zip(single.row(0)).any(|(a, b)| (a - b).abs() > 1e-9));
    }
}
