//! Run configuration.
//!
//! Configs are written as JSON objects with flat dotted keys
//! (`"model.dim": 64`), though nested objects are accepted too. Every key must
//! already exist in the default config; anything else is rejected. Overrides
//! given as `key=value` strings are applied after the file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub category: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessorySpec {
    pub region: String,
    pub category: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub word: String,
    pub rgb: [u8; 3],
}

/// Synthetic dataset generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub regions: Vec<RegionSpec>,
    pub accessories: Vec<AccessorySpec>,
    pub accessory_prob: f64,
    /// Uniform per-channel noise amplitude in 8-bit units.
    pub noise: u8,
    pub occluder_prob: f64,
    /// train / val / test ratios, must sum to 1.
    pub splits: [f64; 3],
    /// Value attributes per region held out as unseen.
    pub holdout: usize,
    pub palette: Vec<PaletteEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: usize,
    /// Visual embedding width.
    pub dim: usize,
    /// Text feature width.
    pub text_dim: usize,
    pub global_tokens: usize,
    /// Number of patch subsets; one local mix token per subset.
    pub subsets: usize,
    /// Learnable prompt vectors per attribute.
    pub prompts: usize,
    pub shared_prompts: bool,
    pub vis_layers: usize,
    pub vis_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub cross_heads: usize,
    pub mlp_ratio: usize,
    pub tau_mix: f64,
    pub logit_scale_init: f64,
    pub mix_sees_mix: bool,
    pub patch_sees_mix: bool,
    /// Global mix tokens see this many leading subsets; `None` means all.
    pub global_subset_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip, 0 disables.
    pub clip_norm: f64,
    pub freeze_text: bool,
    pub hflip: bool,
    pub random_erase: bool,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub sim: f64,
    pub racl: f64,
    pub v2t: f64,
    pub t2v: f64,
}

/// Component switches mirroring the ablation table. `true` = component on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub rlp: bool,
    pub mgmt: bool,
    pub avfe: bool,
    pub racl: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Decision threshold on the cosine scale.
    pub threshold: f64,
    pub calibrate_threshold: bool,
    pub ks: Vec<usize>,
    /// Rank candidates only against the other values of the same region
    /// instead of against every attribute.
    pub grouped_retrieval: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let region = |name: &str, category: &str, values: [&str; 4]| RegionSpec {
            name: name.into(),
            category: category.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        };
        let palette = [
            ("red", [200, 40, 40]),
            ("green", [40, 160, 60]),
            ("blue", [40, 60, 200]),
            ("yellow", [220, 200, 40]),
            ("white", [230, 230, 230]),
            ("black", [30, 30, 30]),
        ];
        Self {
            seed: 7,
            n: 2000,
            height: 64,
            width: 32,
            // Each region's value list is a rotation over a shared colour
            // vocabulary, so the last value of every region (the one held out
            // first) still appears as a seen value somewhere else.
            regions: vec![
                region("head", "hair", ["black", "red", "green", "blue"]),
                region("upper", "clothes", ["red", "green", "blue", "yellow"]),
                region("lower", "trousers", ["green", "blue", "yellow", "white"]),
                region("feet", "shoes", ["blue", "yellow", "white", "black"]),
            ],
            accessories: vec![
                AccessorySpec { region: "head".into(), category: "accessory".into(), value: "hat".into() },
                AccessorySpec { region: "upper".into(), category: "accessory".into(), value: "backpack".into() },
            ],
            accessory_prob: 0.5,
            noise: 30,
            occluder_prob: 0.3,
            splits: [0.8, 0.1, 0.1],
            holdout: 0,
            palette: palette.iter().map(|(w, rgb)| PaletteEntry { word: w.to_string(), rgb: *rgb }).collect(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 64,
            text_dim: 64,
            global_tokens: 8,
            subsets: 4,
            prompts: 4,
            shared_prompts: false,
            vis_layers: 2,
            vis_heads: 4,
            text_layers: 2,
            text_heads: 4,
            cross_heads: 8,
            mlp_ratio: 2,
            tau_mix: 1.0,
            logit_scale_init: 1.0 / 0.07,
            mix_sees_mix: false,
            patch_sees_mix: false,
            global_subset_count: None,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 50,
            min_lr_ratio: 0.01,
            clip_norm: 1.0,
            freeze_text: false,
            hflip: false,
            random_erase: false,
            max_steps: 0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sim: 1.0, racl: 1.0, v2t: 1.0, t2v: 1.0 }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self { rlp: true, mgmt: true, avfe: true, racl: true }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.0, calibrate_threshold: false, ks: vec![1, 2], grouped_retrieval: true }
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut cur = &mut root;
        for p in parts {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config sections are objects");
        }
        cur.insert(last.to_string(), v.clone());
    }
    Value::Object(root)
}

impl Config {
    /// Flat `dotted.key -> value` view.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        serde_json::from_value(unflatten(flat)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply a JSON object (flat dotted keys or nested) on top of `self`.
    pub fn merge_json(&self, json: &Value) -> Result<Self> {
        if !json.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        let mut flat = self.to_flat();
        let mut incoming = BTreeMap::new();
        flatten_into("", json, &mut incoming);
        for (k, v) in incoming {
            if k.is_empty() {
                continue;
            }
            if !flat.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            flat.insert(k, v);
        }
        let cfg = Self::from_flat(&flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides. Values parse as JSON, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut obj = Map::new();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            obj.insert(k.trim().to_string(), value);
        }
        let mut flat = self.to_flat();
        for (k, v) in obj {
            if !flat.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            flat.insert(k, v);
        }
        let cfg = Self::from_flat(&flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json: Value = serde_json::from_str(&text)?;
        Self::default().merge_json(&json)
    }

    /// Writes the flat form, which is also what [`Config::load`] reads back.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_flat())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the canonical (sorted flat) JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(&self.to_flat()).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let d = &self.data;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.patch == 0 || d.height % m.patch != 0 || d.width % m.patch != 0 {
            return bad(format!("image {}x{} is not divisible by patch {}", d.height, d.width, m.patch));
        }
        for (name, width, heads) in [
            ("vis_heads", m.dim, m.vis_heads),
            ("text_heads", m.text_dim, m.text_heads),
            ("cross_heads", m.text_dim, m.cross_heads),
        ] {
            if heads == 0 || width % heads != 0 {
                return bad(format!("{name}={heads} must divide width {width}"));
            }
        }
        if m.subsets == 0 {
            return bad("model.subsets must be >= 1".into());
        }
        if m.global_tokens + m.subsets == 0 {
            return bad("at least one mix token is required".into());
        }
        if let Some(g) = m.global_subset_count {
            if g == 0 || g > m.subsets {
                return bad(format!("global_subset_count {g} must lie in 1..={}", m.subsets));
            }
        }
        if m.tau_mix <= 0.0 || m.logit_scale_init <= 0.0 {
            return bad("temperatures must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&t.min_lr_ratio) || t.lr < 0.0 {
            return bad("learning rate settings out of range".into());
        }
        if self.eval.ks.contains(&0) {
            return bad("eval.ks must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let cfg = Config::default();
        let back = Config::from_flat(&cfg.to_flat()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::default().merge_json(&serde_json::json!({"model.depth": 3})).unwrap_err();
        assert!(err.to_string().contains("model.depth"));
        assert!(Config::default().with_overrides(&["train.nope=1"]).is_err());
    }

    #[test]
    fn overrides_win_and_parse_json() {
        let cfg = Config::default()
            .merge_json(&serde_json::json!({"train.epochs": 3, "model": {"dim": 32}}))
            .unwrap()
            .with_overrides(&["train.epochs=5", "ablation.racl=false"])
            .unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.model.dim, 32);
        assert!(!cfg.ablation.racl);
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let b = a.with_overrides(&["train.seed=1"]).unwrap();
        assert_eq!(a.hash(), Config::default().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn indivisible_patch_is_invalid() {
        assert!(Config::default().with_overrides(&["model.patch=7"]).is_err());
    }
}
