//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use focuspar::encoders::PatchEmbed;
use focuspar::graph::Graph;
use focuspar::mgmt::{MaskOptions, VisualEncoder};
use focuspar::nn::{Binder, ParamStore};
use focuspar::schema::{AttrKind, AttributeDef, AttributeSchema};
use focuspar::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bce_brute(s: &[Vec<f64>], target: impl Fn(usize, usize) -> f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let t = target(i, j);
            total -= t * s[i][j].ln() + (1.0 - t) * (1.0 - s[i][j]).ln();
        }
    }
    total / (n * n) as f64
}

pub fn random_prob_matrix(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.01..0.99)).collect()).collect()
}

pub fn random_schema(rng: &mut impl Rng) -> AttributeSchema {
    let regions: Vec<String> = (0..rng.gen_range(1..6)).map(|r| format!("r{r}")).collect();
    let attributes = (0..rng.gen_range(1..25))
        .map(|id| {
            let region_idx = rng.gen_range(0..regions.len());
            AttributeDef {
                id,
                region: regions[region_idx].clone(),
                region_idx,
                category: "part".into(),
                value: format!("v{id}"),
                kind: if rng.gen_bool(0.8) { AttrKind::Value } else { AttrKind::Accessory },
            }
        })
        .collect();
    AttributeSchema { regions, attributes }
}

/// Per-attribute balanced accuracy and per-sample set ratios, written from
/// the definitions with explicit sets.
pub fn metrics_brute(pred: &[Vec<u8>], labels: &[Vec<u8>]) -> [f64; 5] {
    let n = labels.len();
    let z = labels[0].len();
    let mut accs = Vec::new();
    for j in 0..z {
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i][j] == 1).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| labels[i][j] == 0).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let tp = pos.iter().filter(|&&i| pred[i][j] == 1).count() as f64;
        let tn = neg.iter().filter(|&&i| pred[i][j] == 0).count() as f64;
        accs.push((tp / pos.len() as f64 + tn / neg.len() as f64) / 2.0);
    }
    let ma = if accs.is_empty() { 0.0 } else { accs.iter().sum::<f64>() / accs.len() as f64 };
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let p: BTreeSet<usize> = (0..z).filter(|&j| pred[i][j] == 1).collect();
        let y: BTreeSet<usize> = (0..z).filter(|&j| labels[i][j] == 1).collect();
        let inter = p.intersection(&y).count() as f64;
        let union = p.union(&y).count() as f64;
        acc += if union == 0.0 { 1.0 } else { inter / union };
        prec += if p.is_empty() { 1.0 } else { inter / p.len() as f64 };
        rec += if y.is_empty() { 1.0 } else { inter / y.len() as f64 };
    }
    let (acc, prec, rec) = (acc / n as f64, prec / n as f64, rec / n as f64);
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    [ma, acc, prec, rec, f1]
}

pub fn random_binary(rng: &mut impl Rng, n: usize, z: usize, p: f64) -> Vec<Vec<u8>> {
    (0..n).map(|_| (0..z).map(|_| u8::from(rng.gen_bool(p))).collect()).collect()
}

/// Rank of `a` inside `group`: candidates scoring higher, or equal with a
/// lower id, come first.
pub fn recall_brute(scores: &[Vec<f64>], labels: &[Vec<u8>], groups: &[Vec<usize>], targets: &[usize], k: usize) -> f64 {
    let (mut hits, mut pairs) = (0, 0);
    for (s, y) in scores.iter().zip(labels) {
        for group in groups {
            for &a in group {
                if y[a] != 1 || !targets.contains(&a) {
                    continue;
                }
                pairs += 1;
                let above = group.iter().filter(|&&b| s[b] > s[a] || (s[b] == s[a] && b < a)).count();
                if above < k {
                    hits += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        hits as f64 / pairs as f64
    }
}

/// A random recall problem with coarse scores, so that ties occur.
pub struct RecallCase {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
    pub groups: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

pub fn random_recall_case(rng: &mut impl Rng) -> RecallCase {
    let (n, z) = (rng.gen_range(1..20), rng.gen_range(2..12));
    let scores = (0..n).map(|_| (0..z).map(|_| f64::from(rng.gen_range(0..5u8)) / 4.0).collect()).collect();
    let labels = random_binary(rng, n, z, 0.4);
    let mut ids: Vec<usize> = (0..z).collect();
    ids.sort_by_key(|_| rng.gen::<u32>());
    let cut = rng.gen_range(1..=z);
    let groups = vec![ids[..cut].to_vec(), ids[cut..].to_vec()];
    let targets = (0..z).filter(|_| rng.gen_bool(0.6)).collect();
    RecallCase { scores, labels, groups, targets }
}

pub const S: usize = 12;
pub const K_G: usize = 2;
pub const K_L: usize = 3;
pub const D: usize = 16;

pub fn encoder<F: Real>(layers: usize, seed: u64) -> (VisualEncoder, ParamStore<F>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let embed = PatchEmbed::new(&mut store, &mut rng, 2, S, D);
    let enc = VisualEncoder::new(&mut store, &mut rng, embed, K_G, K_L, true, MaskOptions::default(), D, layers, 4, 2).unwrap();
    (enc, store)
}

/// Mix token outputs (`K x D`) for one image of post-embedding tokens.
pub fn mix_out<F: Real>(enc: &VisualEncoder, store: &ParamStore<F>, tokens: &Tensor<F>) -> Tensor<F> {
    let g = Graph::new();
    let p = Binder::new(&g, store);
    (*enc.forward_tokens(&p, p.input(tokens.clone())).m_out.value()).clone()
}

pub fn max_row_diff<F: Real>(a: &Tensor<F>, b: &Tensor<F>, row: usize) -> f64 {
    a.row(row).iter().zip(b.row(row)).map(|(x, y)| (x.f64() - y.f64()).abs()).fold(0.0, f64::max)
}
