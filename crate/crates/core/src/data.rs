//! Procedural pedestrian-attribute images with exact labels.
//!
//! An image is split into horizontal bands, one per region. Each band is filled
//! with the palette colour of the value attribute sampled for that region, and
//! each positive accessory stamps a fixed glyph into its region. Noise and
//! occluder bars are applied after the labels are fixed.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::schema::{build_schema, split_open_domain, AttributeSchema};

const GLYPH: usize = 6;
const GLYPH_A: [u8; 3] = [255, 0, 255];
const GLYPH_B: [u8; 3] = [0, 255, 255];

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0; height * width * 3] }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn hflip(&self) -> Self {
        let mut out = Image::new(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, self.width - 1 - c, self.pixel(r, c));
            }
        }
        out
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Dataset(format!("malformed PPM: {m}"));
        let mut reader = BufReader::new(bytes);
        let mut fields = Vec::new();
        // header: magic, width, height, maxval; '#' comments allowed between fields
        while fields.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(|_| bad("header"))? == 0 {
                return Err(bad("truncated header"));
            }
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_string));
        }
        if fields.len() != 4 || fields[0] != "P6" {
            return Err(bad("expected P6 header on separate lines"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("dimension"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit maxval 255 is supported"));
        }
        let mut pixels = Vec::new();
        reader.read_to_end(&mut pixels).map_err(|_| bad("body"))?;
        if pixels.len() != width * height * 3 {
            return Err(bad("pixel count"));
        }
        Ok(Self { height, width, pixels })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSample {
    pub sample_id: usize,
    pub image: Image,
    pub labels: Vec<u8>,
}

/// What a sample shows, fixed before any pixel is drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderPlan {
    /// Chosen value attribute id per region.
    pub values: Vec<usize>,
    /// Accessory attribute ids that are present.
    pub accessories: Vec<usize>,
}

impl RenderPlan {
    pub fn labels(&self, z: usize) -> Vec<u8> {
        let mut labels = vec![0u8; z];
        for &id in self.values.iter().chain(&self.accessories) {
            labels[id] = 1;
        }
        labels
    }
}

fn palette_colour(cfg: &DataConfig, word: &str) -> [u8; 3] {
    cfg.palette.iter().find(|p| p.word == word).map(|p| p.rgb).expect("schema checks palette words")
}

fn band_height(cfg: &DataConfig, schema: &AttributeSchema) -> usize {
    cfg.height / schema.regions.len()
}

/// Top-left corner of accessory `id`'s glyph.
fn glyph_origin(cfg: &DataConfig, schema: &AttributeSchema, id: usize) -> (usize, usize) {
    let a = schema.attr(id);
    let bh = band_height(cfg, schema);
    let slot = schema.region_accessories(a.region_idx).iter().position(|&x| x == id).unwrap_or(0);
    let top = a.region_idx * bh + bh.saturating_sub(GLYPH) / 2;
    (top, 2 + slot * (GLYPH + 4))
}

fn sample_plan(rng: &mut impl Rng, schema: &AttributeSchema, cfg: &DataConfig) -> RenderPlan {
    let values = (0..schema.regions.len())
        .map(|r| {
            let vals = schema.region_values(r);
            vals[rng.gen_range(0..vals.len())]
        })
        .collect();
    let accessories = (0..schema.regions.len())
        .flat_map(|r| schema.region_accessories(r))
        .filter(|_| rng.gen_bool(cfg.accessory_prob.clamp(0.0, 1.0)))
        .collect();
    RenderPlan { values, accessories }
}

/// Draw a plan without noise or occluders.
pub fn draw_plan(plan: &RenderPlan, schema: &AttributeSchema, cfg: &DataConfig) -> Image {
    let mut img = Image::new(cfg.height, cfg.width);
    let bh = band_height(cfg, schema);
    for (r, &id) in plan.values.iter().enumerate() {
        let rgb = palette_colour(cfg, &schema.attr(id).value);
        for row in r * bh..(r + 1) * bh {
            for col in 0..cfg.width {
                img.set_pixel(row, col, rgb);
            }
        }
    }
    for &id in &plan.accessories {
        let (top, left) = glyph_origin(cfg, schema, id);
        for dr in 0..GLYPH {
            for dc in 0..GLYPH {
                let (row, col) = (top + dr, left + dc);
                if row < cfg.height && col < cfg.width {
                    let rgb = if (dr / 2 + dc / 2) % 2 == 0 { GLYPH_A } else { GLYPH_B };
                    img.set_pixel(row, col, rgb);
                }
            }
        }
    }
    img
}

/// Render one sample. All randomness comes from `rng`.
pub fn render_sample(
    rng: &mut impl Rng,
    schema: &AttributeSchema,
    cfg: &DataConfig,
    sample_id: usize,
) -> Result<SyntheticSample> {
    if cfg.height % schema.regions.len() != 0 {
        return Err(Error::Dataset(format!(
            "image height {} is not divisible by {} regions",
            cfg.height,
            schema.regions.len()
        )));
    }
    let plan = sample_plan(rng, schema, cfg);
    let labels = plan.labels(schema.len());
    let mut image = draw_plan(&plan, schema, cfg);
    let amp = i32::from(cfg.noise);
    if amp > 0 {
        for p in image.pixels.iter_mut() {
            *p = (i32::from(*p) + rng.gen_range(-amp..=amp)).clamp(0, 255) as u8;
        }
    }
    if rng.gen_bool(cfg.occluder_prob.clamp(0.0, 1.0)) {
        let width = rng.gen_range(2..=3usize).min(cfg.width);
        let col = rng.gen_range(0..=cfg.width - width);
        let grey = rng.gen_range(60..=200u8);
        for row in 0..cfg.height {
            for c in col..col + width {
                image.set_pixel(row, c, [grey; 3]);
            }
        }
    }
    Ok(SyntheticSample { sample_id, image, labels })
}

/// Recover labels from a noiseless, unoccluded rendering.
pub fn decode_labels(image: &Image, schema: &AttributeSchema, cfg: &DataConfig) -> Option<Vec<u8>> {
    let bh = band_height(cfg, schema);
    let mut labels = vec![0u8; schema.len()];
    for r in 0..schema.regions.len() {
        let probe = image.pixel(r * bh + bh - 1, cfg.width - 1);
        let id = schema
            .region_values(r)
            .into_iter()
            .find(|&id| palette_colour(cfg, &schema.attr(id).value) == probe)?;
        labels[id] = 1;
        for acc in schema.region_accessories(r) {
            let (top, left) = glyph_origin(cfg, schema, acc);
            if image.pixel(top, left) == GLYPH_A && image.pixel(top, left + 2) == GLYPH_B {
                labels[acc] = 1;
            }
        }
    }
    Some(labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// `[train, val, test]` sizes; val and test are floored, train takes the rest.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Dataset(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let take = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let val = take(ratios[1]);
    let test = take(ratios[2]);
    Ok([n - val - test, val, test])
}

/// An in-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub schema: AttributeSchema,
    pub samples: Vec<SyntheticSample>,
    pub splits: Vec<Split>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl Dataset {
    /// Render the whole corpus. Sample `i` draws from stream `i` of the seed.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        let schema = build_schema(cfg)?;
        let sizes = split_sizes(cfg.n, cfg.splits)?;
        let (seen, unseen) = split_open_domain(&schema, cfg.holdout)?;
        let samples = (0..cfg.n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                render_sample(&mut rng, &schema, cfg, i)
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = (0..cfg.n)
            .map(|i| match i {
                i if i < sizes[0] => Split::Train,
                i if i < sizes[0] + sizes[1] => Split::Val,
                _ => Split::Test,
            })
            .collect();
        Ok(Self { config: cfg.clone(), schema, samples, splits, seen, unseen })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<Vec<u8>> {
        idx.iter().map(|&i| self.samples[i].labels.clone()).collect()
    }

    /// Write images, manifest and header into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (s, &split) in self.samples.iter().zip(&self.splits) {
            let file = format!("images/{:06}.ppm", s.sample_id);
            let path = dir.join(&file);
            fs::write(&path, s.image.to_ppm()).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry { sample_id: s.sample_id, file, split, labels: s.labels.clone() });
        }
        let header = ManifestHeader {
            seed: self.config.seed,
            config: self.config.clone(),
            schema: self.schema.clone(),
            seen: self.seen.clone(),
            unseen: self.unseen.clone(),
        };
        let header_path = dir.join(HEADER_FILE);
        let text = serde_json::to_string_pretty(&header)? + "\n";
        fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        for e in &entries {
            let line = serde_json::to_string(e)?;
            writeln!(f, "{line}").map_err(|err| Error::io(&manifest_path, err))?;
        }
        Ok(DatasetManifest { dir: dir.to_path_buf(), header, entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        let cfg = &manifest.header.config;
        let z = manifest.header.schema.len();
        let mut samples = Vec::with_capacity(manifest.entries.len());
        let mut splits = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let image = Image::from_ppm(&bytes)?;
            if image.height != cfg.height || image.width != cfg.width {
                return Err(Error::Dataset(format!("{} has the wrong dimensions", e.file)));
            }
            if e.labels.len() != z || e.labels.iter().any(|&l| l > 1) {
                return Err(Error::Dataset(format!("sample {} has a malformed label row", e.sample_id)));
            }
            samples.push(SyntheticSample { sample_id: e.sample_id, image, labels: e.labels.clone() });
            splits.push(e.split);
        }
        Ok(Self {
            config: cfg.clone(),
            schema: manifest.header.schema,
            samples,
            splits,
            seen: manifest.header.seen,
            unseen: manifest.header.unseen,
        })
    }
}

pub const HEADER_FILE: &str = "header.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub seed: u64,
    pub config: DataConfig,
    pub schema: AttributeSchema,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub file: String,
    pub split: Split,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let header_path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: ManifestHeader = serde_json::from_str(&text)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { dir: dir.to_path_buf(), header, entries })
    }

    /// SHA-256 over the header and manifest files as written.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for name in [HEADER_FILE, MANIFEST_FILE] {
            let path = self.dir.join(name);
            h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
        Ok(h.finalize().into())
    }
}

/// Generate the corpus described by `cfg` and write it to `dir`.
pub fn generate_dataset(cfg: &DataConfig, dir: &Path) -> Result<DatasetManifest> {
    Dataset::generate(cfg)?.write(dir)
}
