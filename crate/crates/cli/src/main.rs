use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use focuspar::ablation::{ablation_csv, run_ablation_suite};
use focuspar::checkpoint::Checkpoint;
use focuspar::config::Config;
use focuspar::data::{generate_dataset, Dataset, Split};
use focuspar::eval::{attention_csv, evaluate, image_attention, metrics_header, retrieval_spec, split_scores};
use focuspar::gradcheck::{check_training_batch, GradCheckOptions};
use focuspar::model::Focus;
use focuspar::nn::ParamStore;
use focuspar::schema::{split_explicit, split_open_domain};
use focuspar::train::{config_beside, init_model, restore, train};

#[derive(Parser, Debug)]
#[command(name = "focuspar", version, about = "Train and evaluate attribute-guided mix-token recognizers on synthetic pedestrians")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config with flat dotted keys or nested sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the config file
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct CkptArgs {
    /// Trained checkpoint; its config.json is read from the same directory
    #[arg(long)]
    ckpt: PathBuf,
    /// Load even when the checkpoint's config hash does not match
    #[arg(long)]
    force_load: bool,
    /// Dataset directory written by gen-data (generated from the config otherwise)
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON file naming the unseen attributes: {"holdout": n} or {"unseen": [ids or names]}
    #[arg(long, value_name = "FILE")]
    open_domain: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to disk
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train a model and write checkpoint.bin, config.json, vocab.txt and loss.csv
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Closed-set metrics and Recall@K as one CSV row
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write metrics.csv and per_attr.csv here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-K attributes per region for every image of a split
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Candidates listed per group (largest eval.ks by default)
        #[arg(long)]
        k: Option<usize>,
        /// Write retrieval.csv here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients in f64
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Check a trained checkpoint instead of a fresh initialization
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Coordinates sampled per parameter tensor
        #[arg(long, default_value_t = 10)]
        coords: usize,
        /// Training images in the checked batch
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Train and evaluate the five component-ablation rows
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Cross-attention weights over the mix tokens for one image
    DumpAttn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        /// Sample id
        #[arg(long)]
        sample: usize,
        /// Write attn_<sample>.csv here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A run that finished but whose check did not pass.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            report("usage", first);
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            report(kind, &format!("{e:#}"));
            ExitCode::from(code)
        }
    }
}

fn report(kind: &str, msg: &str) {
    eprintln!("error kind={kind} msg={}", msg.replace(['\n', '\r'], " "));
}

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return ("gradcheck", 2);
    }
    match e.downcast_ref::<focuspar::Error>() {
        Some(focuspar::Error::Numerical(_)) => ("numerical", 2),
        Some(focuspar::Error::Schema(_)) => ("schema", 1),
        Some(focuspar::Error::Config(_)) => ("config", 1),
        Some(focuspar::Error::Shape(_)) => ("shape", 1),
        Some(focuspar::Error::Invalid(_)) => ("invalid", 1),
        Some(focuspar::Error::Checkpoint(_)) => ("checkpoint", 1),
        Some(focuspar::Error::Dataset(_)) => ("dataset", 1),
        Some(focuspar::Error::Io { .. }) => ("io", 1),
        Some(focuspar::Error::Json(_)) => ("json", 1),
        None if e.downcast_ref::<std::io::Error>().is_some() => ("io", 1),
        None => ("invalid", 1),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var("FOCUSPAR_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("FOCUSPAR_THREADS must be a positive integer, got `{v}`"))?;
        focuspar::set_threads(n)?;
    }
    match cli.cmd {
        Command::GenData { cfg, seed, out } => {
            let cfg = fresh_config(&cfg, seed)?;
            prepare_out(&out)?;
            let manifest = generate_dataset(&cfg.data, &out.out)?;
            println!("wrote {} samples to {}", manifest.entries.len(), out.out.display());
        }
        Command::Train { cfg, seed, data, out } => {
            let mut cfg = fresh_config(&cfg, seed)?;
            let ds = dataset(&mut cfg, data.as_deref())?;
            prepare_out(&out)?;
            let run = train(&cfg, &ds, Some(&out.out))?;
            if let Some(last) = run.history.last() {
                println!("trained {} steps, final loss {:.6}", run.history.len(), last.report.total);
            }
        }
        Command::Eval { cfg, ckpt, split, out } => {
            let split = Split::parse(&split)?;
            let (cfg, ds, model, store) = load_trained(&cfg, &ckpt)?;
            let open = ckpt.open_domain.is_some();
            let report = evaluate(&model, &store, &ds, &cfg.eval, split, open)?;
            let csv = format!("{}\n{}\n", metrics_header(&cfg.eval.ks), report.csv_row());
            print!("{csv}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write(&dir.join("metrics.csv"), &csv)?;
                let mut table = String::from("attribute,balanced_acc,threshold\n");
                for ((&a, acc), t) in ds.seen.iter().zip(&report.closed.per_attr).zip(&report.thresholds) {
                    let acc = acc.map_or_else(String::new, |v| format!("{v:.6}"));
                    table += &format!("{},{acc},{t:.6}\n", ds.schema.attr(a).display_name());
                }
                write(&dir.join("per_attr.csv"), &table)?;
            }
        }
        Command::Retrieve { cfg, ckpt, split, k, out } => {
            let split = Split::parse(&split)?;
            let (cfg, ds, model, store) = load_trained(&cfg, &ckpt)?;
            let k = k.or_else(|| cfg.eval.ks.iter().copied().max()).unwrap_or(1);
            let spec = retrieval_spec(&ds.schema, &ds.unseen, cfg.eval.grouped_retrieval, ckpt.open_domain.is_some())?;
            let scores = split_scores(&model, &store, &ds, split)?;
            let mut csv = String::from("sample_id,group,rank,attribute,score,label\n");
            for (&i, s) in ds.indices(split).iter().zip(&scores) {
                for (g, group) in spec.groups.iter().enumerate() {
                    let mut order = group.clone();
                    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                    for (rank, &a) in order.iter().take(k).enumerate() {
                        let name = ds.schema.attr(a).display_name();
                        csv += &format!("{},{g},{},{name},{:.6},{}\n", ds.samples[i].sample_id, rank + 1, s[a], ds.samples[i].labels[a]);
                    }
                }
            }
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                    write(&dir.join("retrieval.csv"), &csv)?;
                }
                None => print!("{csv}"),
            }
        }
        Command::Gradcheck { cfg, ckpt, seed, data, tol, coords, batch, corrupt } => {
            let (model, store, ds) = match &ckpt {
                Some(path) => {
                    let args = CkptArgs { ckpt: path.clone(), force_load: false, data, open_domain: None };
                    let (_, ds, model, store) = load_trained(&cfg, &args)?;
                    (model, store.cast::<f64>(), ds)
                }
                None => {
                    let mut cfg = fresh_config(&cfg, seed)?;
                    let ds = dataset(&mut cfg, data.as_deref())?;
                    let (model, store) = init_model(&cfg, &ds)?;
                    (model, store.cast::<f64>(), ds)
                }
            };
            let opts = GradCheckOptions { coords, tolerance: tol, corrupt, ..GradCheckOptions::default() };
            let weights = focuspar::config::LossWeights::default();
            let report = check_training_batch(&model, &store, &ds, batch, &weights, &opts)?;
            println!("param,checked,max_rel_err");
            for g in &report.groups {
                println!("{},{},{:.3e}", g.name, g.checked, g.max_rel_err);
            }
            let worst = report.worst().map_or("-", |g| g.name.as_str());
            let verdict = if report.passed() { "pass" } else { "fail" };
            println!("gradcheck {verdict} max_rel_err={:.3e} tol={tol:e} worst={worst}", report.max_rel_err());
            if !report.passed() {
                return Err(CheckFailed(format!("max relative error {:.3e} at {worst} exceeds {tol:e}", report.max_rel_err())).into());
            }
        }
        Command::Ablate { cfg, seed, data, split, out } => {
            let split = Split::parse(&split)?;
            let mut cfg = fresh_config(&cfg, seed)?;
            let ds = dataset(&mut cfg, data.as_deref())?;
            prepare_out(&out)?;
            let rows = run_ablation_suite(&cfg, &ds, split, Some(&out.out))?;
            let csv = ablation_csv(&rows);
            write(&out.out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::DumpAttn { cfg, ckpt, sample, out } => {
            let (_, ds, model, store) = load_trained(&cfg, &ckpt)?;
            let idx = ds.samples.iter().position(|s| s.sample_id == sample).ok_or_else(|| anyhow!("no sample with id {sample}"))?;
            let map = image_attention(&model, &store, &ds, idx)?;
            let names: Vec<String> = ds.schema.attributes.iter().map(|a| a.display_name()).collect();
            let csv = attention_csv(&map, &names);
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                    write(&dir.join(format!("attn_{sample}.csv")), &csv)?;
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| focuspar::Error::io(path, e).into())
}

fn base_config(args: &ConfigArgs, file: Option<&Path>) -> Result<Config> {
    let base = match file {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(base.with_overrides(&args.overrides)?)
}

/// Config for a run that starts from scratch; `--seed` drives both the data
/// and the training streams.
fn fresh_config(args: &ConfigArgs, seed: Option<u64>) -> Result<Config> {
    let mut cfg = base_config(args, args.config.as_deref())?;
    if let Some(s) = seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    log_config(&cfg);
    Ok(cfg)
}

fn log_config(cfg: &Config) {
    log::info!("seed data={} train={}", cfg.data.seed, cfg.train.seed);
    log::info!("config {}", serde_json::to_string(&cfg.to_flat()).unwrap_or_default());
}

/// Load the dataset from `dir` (adopting its data section) or generate it.
fn dataset(cfg: &mut Config, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => {
            let ds = Dataset::load(d)?;
            if ds.config != cfg.data {
                log::info!("using the data settings recorded in {}", d.display());
                cfg.data = ds.config.clone();
            }
            Ok(ds)
        }
        None => Ok(Dataset::generate(&cfg.data)?),
    }
}

fn prepare_out(out: &OutArgs) -> Result<()> {
    let dir = &out.out;
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| focuspar::Error::io(dir, e))?.next().is_some();
        if non_empty && !out.force {
            return Err(focuspar::Error::Invalid(format!("{} is not empty; pass --force to write into it", dir.display())).into());
        }
    }
    fs::create_dir_all(dir).map_err(|e| focuspar::Error::io(dir, e))?;
    Ok(())
}

/// Config, dataset and restored parameters for a trained checkpoint. The
/// checkpoint hash is checked against the stored config before overrides.
fn load_trained(args: &ConfigArgs, ckpt: &CkptArgs) -> Result<(Config, Dataset, Focus, ParamStore<f32>)> {
    let file = args.config.clone().unwrap_or_else(|| config_beside(&ckpt.ckpt));
    let stored = Config::load(&file).with_context(|| format!("reading the config for {}", ckpt.ckpt.display()))?;
    let checkpoint = Checkpoint::load(&ckpt.ckpt, Some(stored.hash()), ckpt.force_load)?;
    let mut cfg = stored.with_overrides(&args.overrides)?;
    log_config(&cfg);
    let mut ds = dataset(&mut cfg, ckpt.data.as_deref())?;
    if let Some(path) = &ckpt.open_domain {
        let (seen, unseen) = open_domain_split(&ds, path)?;
        let trained_on: Vec<usize> = unseen.iter().copied().filter(|u| !ds.unseen.contains(u)).collect();
        if !trained_on.is_empty() {
            log::warn!("attributes {trained_on:?} were seen in training; their retrieval is not open-domain");
        }
        ds.seen = seen;
        ds.unseen = unseen;
    }
    let (model, store) = restore(&cfg, &ds, &checkpoint)?;
    log::info!("loaded {} (step {})", ckpt.ckpt.display(), checkpoint.step);
    Ok((cfg, ds, model, store))
}

fn open_domain_split(ds: &Dataset, path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| focuspar::Error::io(path, e))?;
    let json: Value = serde_json::from_str(&text).map_err(focuspar::Error::from)?;
    let schema = &ds.schema;
    if let Some(n) = json.get("holdout") {
        let n = n.as_u64().ok_or_else(|| focuspar::Error::Config("`holdout` must be a non-negative integer".into()))?;
        return Ok(split_open_domain(schema, n as usize)?);
    }
    let Some(list) = json.get("unseen").and_then(Value::as_array) else {
        bail!(focuspar::Error::Config(format!("{} needs a `holdout` count or an `unseen` list", path.display())));
    };
    let ids = list
        .iter()
        .map(|v| match v {
            Value::Number(n) => n.as_u64().map(|n| n as usize).ok_or_else(|| format!("bad attribute id {n}")),
            Value::String(s) => schema.attributes.iter().position(|a| a.display_name() == *s).ok_or_else(|| format!("unknown attribute `{s}`")),
            other => Err(format!("bad unseen entry {other}")),
        })
        .collect::<std::result::Result<Vec<usize>, String>>()
        .map_err(focuspar::Error::Config)?;
    Ok(split_explicit(schema, &ids)?)
}
