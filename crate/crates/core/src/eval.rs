//! Closed-set evaluation, retrieval, and attention inspection for a trained
//! model.

use std::fmt::Write as _;

use crate::config::EvalConfig;
use crate::data::{Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::metrics::{calibrate_thresholds, closed_metrics, decide, recall_at_k, ClosedMetrics};
use crate::model::{attention_maps, cosine_matrix, Focus};
use crate::nn::ParamStore;
use crate::schema::{AttrKind, AttributeSchema};
use crate::tensor::{Real, Tensor};

const CHUNK: usize = 64;

/// Which attributes compete in retrieval and which positive pairs count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalSpec {
    pub groups: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

/// Grouped: every region's value attributes form one candidate group.
/// Otherwise all attributes form a single group. Open-domain counts only
/// pairs whose attribute is unseen.
pub fn retrieval_spec(schema: &AttributeSchema, unseen: &[usize], grouped: bool, open_domain: bool) -> Result<RetrievalSpec> {
    let groups: Vec<Vec<usize>> = if grouped {
        (0..schema.regions.len()).map(|r| schema.region_values(r)).collect()
    } else {
        vec![(0..schema.len()).collect()]
    };
    let targets: Vec<usize> = if open_domain {
        unseen.to_vec()
    } else {
        groups.iter().flatten().copied().collect()
    };
    if open_domain && targets.is_empty() {
        return Err(Error::Invalid("open-domain retrieval needs at least one unseen attribute".into()));
    }
    if groups.iter().all(Vec::is_empty) {
        return Err(Error::Invalid("empty retrieval candidate set".into()));
    }
    Ok(RetrievalSpec { groups, targets })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: Split,
    pub closed: ClosedMetrics,
    /// `(K, Recall@K)`.
    pub recall: Vec<(usize, f64)>,
    /// Decision threshold per seen attribute.
    pub thresholds: Vec<f64>,
}

fn images<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<&'a Image> {
    idx.iter().map(|&i| &ds.samples[i].image).collect()
}

/// Cosine scores (`N x Z`) of every attribute for a split's images; unseen
/// attributes use region-mean prompts.
pub fn split_scores<F: Real>(model: &Focus, store: &ParamStore<F>, ds: &Dataset, split: Split) -> Result<Vec<Vec<f64>>> {
    let idx = ds.indices(split);
    let all: Vec<usize> = (0..ds.schema.len()).collect();
    cosine_matrix(model, store, &images(ds, &idx), &all, &ds.seen, CHUNK)
}

/// Closed-set metrics over the seen attributes plus Recall@K.
pub fn evaluate<F: Real>(
    model: &Focus,
    store: &ParamStore<F>,
    ds: &Dataset,
    cfg: &EvalConfig,
    split: Split,
    open_domain: bool,
) -> Result<MetricsReport> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("the {} split is empty", split.as_str())));
    }
    let scores = split_scores(model, store, ds, split)?;
    let labels = ds.labels(&idx);
    let seen = &ds.seen;
    let seen_cols = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows.iter().map(|r| seen.iter().map(|&a| r[a]).collect()).collect() };
    let seen_labels = |rows: &[Vec<u8>]| -> Vec<Vec<u8>> { rows.iter().map(|r| seen.iter().map(|&a| r[a]).collect()).collect() };
    let thresholds = if cfg.calibrate_threshold {
        let val = ds.indices(Split::Val);
        if val.is_empty() {
            return Err(Error::Invalid("threshold calibration needs a non-empty val split".into()));
        }
        let val_scores = split_scores(model, store, ds, Split::Val)?;
        calibrate_thresholds(&seen_cols(&val_scores), &seen_labels(&ds.labels(&val)), cfg.threshold)
    } else {
        vec![cfg.threshold; seen.len()]
    };
    let closed = closed_metrics(&decide(&seen_cols(&scores), &thresholds), &seen_labels(&labels));
    let spec = retrieval_spec(&ds.schema, &ds.unseen, cfg.grouped_retrieval, open_domain)?;
    let r = recall_at_k(&scores, &labels, &spec.groups, &spec.targets, &cfg.ks);
    Ok(MetricsReport { split, closed, recall: cfg.ks.iter().copied().zip(r).collect(), thresholds })
}

pub fn metrics_header(ks: &[usize]) -> String {
    let mut s = String::from("split,mA,acc,prec,recall,f1");
    for k in ks {
        let _ = write!(s, ",r@{k}");
    }
    s
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let c = &self.closed;
        let mut s = format!("{},{:.6},{:.6},{:.6},{:.6},{:.6}", self.split.as_str(), c.ma, c.acc, c.prec, c.recall, c.f1);
        for (_, r) in &self.recall {
            let _ = write!(s, ",{r:.6}");
        }
        s
    }
}

/// Head-pooled attention maps of one image over all attributes (`Z x K`).
pub fn image_attention<F: Real>(model: &Focus, store: &ParamStore<F>, ds: &Dataset, sample: usize) -> Result<Tensor<f64>> {
    let img = &ds.samples.get(sample).ok_or_else(|| Error::Invalid(format!("no sample {sample}")))?.image;
    let all: Vec<usize> = (0..ds.schema.len()).collect();
    Ok(attention_maps(model, store, &[img], &all, &ds.seen, 1)?.remove(0))
}

/// One row of `K` attention weights per attribute under an
/// `attribute,m0,...` header.
pub fn attention_csv(map: &Tensor<f64>, names: &[String]) -> String {
    let mut s = String::from("attribute");
    for k in 0..map.cols() {
        let _ = write!(s, ",m{k}");
    }
    s.push('\n');
    for (r, name) in names.iter().enumerate().take(map.rows()) {
        s += name;
        for x in map.row(r) {
            let _ = write!(s, ",{x:.6}");
        }
        s.push('\n');
    }
    s
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean pooled-attention cosine over same-region attribute pairs minus the
/// mean over cross-region pairs, averaged over a split's images. Only value
/// attributes seen in training take part.
pub fn region_attention_margin<F: Real>(model: &Focus, store: &ParamStore<F>, ds: &Dataset, split: Split) -> Result<f64> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("the {} split is empty", split.as_str())));
    }
    let attrs: Vec<usize> = ds.seen.iter().copied().filter(|&a| ds.schema.attr(a).kind == AttrKind::Value).collect();
    let maps = attention_maps(model, store, &images(ds, &idx), &attrs, &ds.seen, CHUNK)?;
    let mut total = 0.0;
    for g in &maps {
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..attrs.len() {
            for j in i + 1..attrs.len() {
                let c = cosine(g.row(i), g.row(j));
                if ds.schema.attr(attrs[i]).region_idx == ds.schema.attr(attrs[j]).region_idx {
                    within += c;
                    nw += 1;
                } else {
                    cross += c;
                    nc += 1;
                }
            }
        }
        if nw == 0 || nc == 0 {
            return Err(Error::Invalid("need same-region and cross-region attribute pairs".into()));
        }
        total += within / nw as f64 - cross / nc as f64;
    }
    Ok(total / maps.len() as f64)
}
