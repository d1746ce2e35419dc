//! Training loop and run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::LossReport;
use crate::model::Focus;
use crate::nn::ParamStore;
use crate::optim::{clip_grad_norm, lr_at, Adam};
use crate::schema::build_schema;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub struct TrainOutcome {
    pub model: Focus,
    pub store: ParamStore<f32>,
    pub history: Vec<StepLog>,
    pub checkpoint: Checkpoint,
}

/// Random-number streams derived from the training seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Build the model for `cfg` with its seeded initial parameters.
pub fn init_model(cfg: &Config, ds: &Dataset) -> Result<(Focus, ParamStore<f32>)> {
    check_dataset(cfg, ds)?;
    Focus::new(cfg, &ds.schema, &mut stream(cfg.train.seed, 0))
}

/// Rebuild a trained model from its config and checkpoint.
pub fn restore(cfg: &Config, ds: &Dataset, ckpt: &Checkpoint) -> Result<(Focus, ParamStore<f32>)> {
    let (model, mut store) = init_model(cfg, ds)?;
    ckpt.apply_to(&mut store)?;
    Ok((model, store))
}

fn check_dataset(cfg: &Config, ds: &Dataset) -> Result<()> {
    if build_schema(&cfg.data)? != ds.schema {
        return Err(Error::Dataset("dataset schema does not match the config".into()));
    }
    if (ds.config.height, ds.config.width) != (cfg.data.height, cfg.data.width) {
        return Err(Error::Dataset("dataset image size does not match the config".into()));
    }
    Ok(())
}

fn augment(img: &Image, cfg: &Config, rng: &mut impl Rng) -> Image {
    let mut out = img.clone();
    if cfg.train.hflip && rng.gen_bool(0.5) {
        out = out.hflip();
    }
    if cfg.train.random_erase && rng.gen_bool(0.5) {
        let h = rng.gen_range(out.height / 8..=out.height / 4).max(1);
        let w = rng.gen_range(out.width / 8..=out.width / 4).max(1);
        let top = rng.gen_range(0..=out.height - h);
        let left = rng.gen_range(0..=out.width - w);
        for r in top..top + h {
            for c in left..left + w {
                out.set_pixel(r, c, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
    }
    out
}

/// Train on the train split. Unseen attributes never reach the loss.
///
/// With `out` set, the checkpoint, resolved config, vocabulary and loss curve
/// are written there. A non-finite loss or gradient aborts the run; the last
/// good parameters are still saved before the error is returned.
pub fn train(cfg: &Config, ds: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let (model, mut store) = init_model(cfg, ds)?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("the train split is empty".into()));
    }
    if ds.seen.is_empty() {
        return Err(Error::Dataset("no seen attributes to train on".into()));
    }
    let seen = ds.seen.clone();
    let prompts = model.prompts(&seen, &seen)?;
    let t = &cfg.train;
    let per_epoch = train_idx.len().div_ceil(t.batch_size);
    let mut total = t.epochs * per_epoch;
    if t.max_steps > 0 {
        total = total.min(t.max_steps);
    }
    let hash = cfg.hash();
    let mut shuffle_rng = stream(t.seed, 1);
    let mut aug_rng = stream(t.seed, 2);
    let mut adam = Adam::new(store.len());
    let mut history = Vec::with_capacity(total);
    let mut order = train_idx;
    let mut step = 0;
    log::info!("training {total} steps ({per_epoch} per epoch), {} parameters", store.numel());
    'epochs: for epoch in 0..t.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(t.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let augmented: Vec<Image>;
            let images: Vec<&Image> = if t.hflip || t.random_erase {
                augmented = batch.iter().map(|&i| augment(&ds.samples[i].image, cfg, &mut aug_rng)).collect();
                augmented.iter().collect()
            } else {
                batch.iter().map(|&i| &ds.samples[i].image).collect()
            };
            let labels: Vec<Vec<u8>> = batch.iter().map(|&i| seen.iter().map(|&a| ds.samples[i].labels[a]).collect()).collect();
            let lr = lr_at(t, step, total);
            let result = (|| {
                let g = Graph::new();
                let p = model.binder(&g, &store);
                let fwd = model.forward(&p, p.input(model.input(&images)?), &prompts)?;
                let (loss, report) = model.loss(&fwd, &seen, &labels, &cfg.loss)?;
                let grads = p.gradients(&g.backward(loss));
                if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                    return Err(Error::Numerical(format!("non-finite gradient for {}", store.name(*id))));
                }
                Ok((grads, report))
            })();
            let (mut grads, report) = match result {
                Ok(r) => r,
                Err(e) if e.is_numerical() => {
                    log::error!("step {step}: {e}; saving last good parameters");
                    if let Some(dir) = out {
                        write_artifacts(dir, cfg, &model, &Checkpoint::from_store(&store, hash, step as u64), &history)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            clip_grad_norm(&mut grads, t.clip_norm);
            adam.step(&mut store, &grads, lr);
            if step % 50 == 0 || step + 1 == total {
                log::info!("epoch {epoch} step {step} lr {lr:.2e} loss {:.4}", report.total);
            }
            history.push(StepLog { step, lr, report });
            step += 1;
        }
    }
    let checkpoint = Checkpoint::from_store(&store, hash, step as u64);
    if let Some(dir) = out {
        write_artifacts(dir, cfg, &model, &checkpoint, &history)?;
    }
    Ok(TrainOutcome { model, store, history, checkpoint })
}

fn write_artifacts(dir: &Path, cfg: &Config, model: &Focus, ckpt: &Checkpoint, history: &[StepLog]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    model.vocab.save(&dir.join(VOCAB_FILE))?;
    let path = dir.join(LOSS_FILE);
    fs::write(&path, loss_csv(history)).map_err(|e| Error::io(&path, e))
}

/// Loss curve as CSV.
pub fn loss_csv(history: &[StepLog]) -> String {
    let mut s = String::from("step,L_sim,L_racl,L_v2t,L_t2v,L_total\n");
    for h in history {
        let r = &h.report;
        let _ = writeln!(s, "{},{},{},{},{},{}", h.step, r.sim, r.racl, r.v2t, r.t2v, r.total);
    }
    s
}

/// The config file that sits next to a checkpoint.
pub fn config_beside(ckpt: &Path) -> PathBuf {
    ckpt.parent().unwrap_or_else(|| Path::new(".")).join(CONFIG_FILE)
}
