//! Central finite-difference check of the analytic gradients, in f64.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::LossWeights;
use crate::data::{Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Focus;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Coordinates sampled per parameter tensor (all of them if fewer).
    pub coords: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Scale analytic gradients by `1 + corrupt`; a negative control.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { coords: 10, h: 1e-3, tolerance: 1e-4, floor: 1e-6, seed: 0, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check a scalar function of a parameter store against its analytic
/// gradient. `f` returns the loss value and, when asked, the gradients.
pub fn check_fn(
    store: &ParamStore<f64>,
    f: impl Fn(&ParamStore<f64>, bool) -> Result<(f64, Vec<(ParamId, Tensor<f64>)>)>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = f(store, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut groups = Vec::with_capacity(grads.len());
    for (id, g) in &grads {
        let n = g.len();
        let picks = sample(&mut rng, n, opts.coords.min(n)).into_vec();
        let mut worst: f64 = 0.0;
        for c in picks {
            let orig = store.get(*id).data()[c];
            work.get_mut(*id).data_mut()[c] = orig + opts.h;
            let plus = f(&work, false)?.0;
            work.get_mut(*id).data_mut()[c] = orig - opts.h;
            let minus = f(&work, false)?.0;
            work.get_mut(*id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let analytic = g.data()[c] * (1.0 + opts.corrupt.unwrap_or(0.0));
            worst = worst.max(relative_error(analytic, numeric, opts.floor));
        }
        groups.push(GroupCheck { name: store.name(*id).to_string(), checked: opts.coords.min(n), max_rel_err: worst });
    }
    Ok(GradCheckReport { groups, tolerance: opts.tolerance })
}

/// Check the model's weighted loss on one batch. `labels` are restricted to
/// `queries`, which must all be seen attributes.
pub fn check_model(
    model: &Focus,
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    queries: &[usize],
    labels: &[Vec<u8>],
    weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let prompts = model.prompts(queries, queries)?;
    let f = |s: &ParamStore<f64>, want_grad: bool| {
        let g = Graph::new();
        let p = model.binder(&g, s);
        let fwd = model.forward(&p, p.input(input.clone()), &prompts)?;
        let (loss, report) = model.loss(&fwd, queries, labels, weights)?;
        if !report.total.is_finite() {
            return Err(Error::Numerical("non-finite loss during gradient check".into()));
        }
        let grads = if want_grad { p.gradients(&g.backward(loss)) } else { Vec::new() };
        Ok((report.total, grads))
    };
    check_fn(store, f, opts)
}

/// Check the model on the first `batch` training images against every seen
/// attribute.
pub fn check_training_batch(
    model: &Focus,
    store: &ParamStore<f64>,
    ds: &Dataset,
    batch: usize,
    weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let idx: Vec<usize> = ds.indices(Split::Train).into_iter().take(batch).collect();
    if idx.is_empty() || ds.seen.is_empty() {
        return Err(Error::Invalid("gradient check needs training images and seen attributes".into()));
    }
    let images: Vec<&Image> = idx.iter().map(|&i| &ds.samples[i].image).collect();
    let labels: Vec<Vec<u8>> = idx.iter().map(|&i| ds.seen.iter().map(|&a| ds.samples[i].labels[a]).collect()).collect();
    check_model(model, store, &model.input(&images)?, &ds.seen, &labels, weights, opts)
}
