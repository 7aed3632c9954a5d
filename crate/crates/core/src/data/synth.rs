//! Seeded synthetic world of coloured shapes standing in for real images.
//!
//! Each image holds 2 to 4 objects. An object's region features are a
//! one-hot code of its shape, colour and size plus an objectness flag, all
//! with gaussian noise; the remaining regions are background noise. The
//! caption names only the most salient objects, while questions may ask
//! about any object, so the image carries information the caption lacks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::corpus::{save_corpus, Corpus, CorpusItem};
use super::features::{write_features, FeatureSet};
use super::text::Vocabulary;
use crate::error::{Error, Result};
use crate::multimodal::ObjectRegion;

pub const SHAPES: [&str; 8] = [
    "cube", "sphere", "cylinder", "cone", "pyramid", "ring", "star", "disk",
];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "purple", "orange", "white", "black",
];
pub const SIZES: [&str; 2] = ["small", "large"];

/// Feature index where each attribute block starts.
pub const SHAPE_OFFSET: usize = 0;
pub const COLOR_OFFSET: usize = SHAPE_OFFSET + SHAPES.len();
pub const SIZE_OFFSET: usize = COLOR_OFFSET + COLORS.len();
pub const OBJECTNESS_INDEX: usize = SIZE_OFFSET + SIZES.len();
/// Smallest feature width that holds every attribute block.
pub const MIN_FEATURE_DIM: usize = OBJECTNESS_INDEX + 1;

pub const FEATURE_NOISE: f64 = 0.1;
pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 4;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub refs_per_item: usize,
    pub num_regions: usize,
    pub feature_dim: usize,
}

impl SynthConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            n_train: 500,
            n_val: 100,
            n_test: 100,
            refs_per_item: 3,
            num_regions: 8,
            feature_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 || self.refs_per_item == 0 {
            return Err(Error::Config(
                "split sizes and refs_per_item must be at least 1".into(),
            ));
        }
        if self.feature_dim < MIN_FEATURE_DIM {
            return Err(Error::Config(format!(
                "feature_dim {} is below the {MIN_FEATURE_DIM} attribute dimensions",
                self.feature_dim
            )));
        }
        if self.num_regions < MAX_OBJECTS {
            return Err(Error::Config(format!(
                "num_regions must be at least {MAX_OBJECTS}"
            )));
        }
        Ok(())
    }

    fn split_size(&self, split: usize) -> usize {
        [self.n_train, self.n_val, self.n_test][split]
    }
}

/// A latent object of the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
}

impl SceneObject {
    fn phrase(&self) -> String {
        format!(
            "{} {} {}",
            SIZES[self.size], COLORS[self.color], SHAPES[self.shape]
        )
    }
}

/// Objects in decreasing salience plus the regions they emit.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub regions: Vec<ObjectRegion>,
}

fn sample_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Scene {
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid std");
    let k = rng.gen_range(MIN_OBJECTS..=MAX_OBJECTS);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(k);
    while objects.len() < k {
        let o = SceneObject {
            shape: rng.gen_range(0..SHAPES.len()),
            color: rng.gen_range(0..COLORS.len()),
            size: rng.gen_range(0..SIZES.len()),
        };
        if !objects
            .iter()
            .any(|p| p.shape == o.shape || p.color == o.color)
        {
            objects.push(o);
        }
    }
    let mut regions = Vec::with_capacity(cfg.num_regions);
    for (i, o) in objects.iter().enumerate() {
        let mut f: Vec<f32> = (0..cfg.feature_dim)
            .map(|_| noise.sample(rng) as f32)
            .collect();
        f[SHAPE_OFFSET + o.shape] += 1.0;
        f[COLOR_OFFSET + o.color] += 1.0;
        f[SIZE_OFFSET + o.size] += 1.0;
        f[OBJECTNESS_INDEX] += 1.0;
        let extent = if o.size == 1 { 0.45 } else { 0.2 };
        regions.push(ObjectRegion {
            features: f,
            bbox: random_box(rng, extent),
            // Strictly decreasing so the sampled order is the salience order.
            relevance: 0.95 - 0.1 * i as f32,
        });
    }
    for i in 0..cfg.num_regions - k {
        regions.push(ObjectRegion {
            features: (0..cfg.feature_dim)
                .map(|_| noise.sample(rng) as f32)
                .collect(),
            bbox: random_box(rng, 0.3),
            relevance: 0.4 - 0.4 * i as f32 / cfg.num_regions as f32,
        });
    }
    Scene { objects, regions }
}

fn random_box(rng: &mut ChaCha8Rng, extent: f32) -> [f32; 4] {
    let w = extent * rng.gen_range(0.8..1.2);
    let h = extent * rng.gen_range(0.8..1.2);
    let x0 = rng.gen_range(0.0..1.0 - w);
    let y0 = rng.gen_range(0.0..1.0 - h);
    [x0, y0, x0 + w, y0 + h]
}

/// Names the one or two most salient objects.
fn caption(rng: &mut ChaCha8Rng, scene: &Scene) -> String {
    let a = &scene.objects[0];
    if rng.gen_bool(0.5) {
        let b = &scene.objects[1];
        format!("a {} next to a {} .", a.phrase(), b.phrase())
    } else {
        format!("a {} on the table .", a.phrase())
    }
}

fn question(rng: &mut ChaCha8Rng, scene: &Scene) -> String {
    let i = rng.gen_range(0..scene.objects.len());
    let o = &scene.objects[i];
    let (shape, color, size) = (SHAPES[o.shape], COLORS[o.color], SIZES[o.size]);
    match rng.gen_range(0..5) {
        0 => format!("what color is the {shape} ?"),
        1 => format!("what shape is the {color} object ?"),
        2 => format!("is the {color} {shape} small or large ?"),
        3 => {
            let j = (i + 1) % scene.objects.len();
            let n = &scene.objects[j];
            format!(
                "what is next to the {} {} ?",
                COLORS[n.color], SHAPES[n.shape]
            )
        }
        _ => format!("is there a {size} {color} {shape} ?"),
    }
}

/// Up to `refs` distinct questions; repeats only when the scene cannot
/// produce enough distinct ones.
fn questions(rng: &mut ChaCha8Rng, scene: &Scene, refs: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(refs);
    let mut attempts = 0;
    while out.len() < refs {
        let q = question(rng, scene);
        attempts += 1;
        if !out.contains(&q) || attempts > 50 {
            out.push(q);
        }
    }
    out
}

/// One split: corpus items referencing `feature_file`, and the features.
pub fn generate_split(
    cfg: &SynthConfig,
    split: usize,
    feature_file: &str,
) -> (Vec<CorpusItem>, FeatureSet, Vec<Scene>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split as u64);
    let n = cfg.split_size(split);
    let mut items = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let scene = sample_scene(&mut rng, cfg);
        let cap = caption(&mut rng, &scene);
        let qs = questions(&mut rng, &scene, cfg.refs_per_item);
        items.push(CorpusItem {
            id: format!("{}-{i:05}", SPLITS[split]),
            caption: cap,
            questions: qs,
            feature_ref: format!("{feature_file}#{i}"),
        });
        images.push(scene.regions.clone());
        scenes.push(scene);
    }
    let set = FeatureSet {
        num_regions: cfg.num_regions,
        feature_dim: cfg.feature_dim,
        images,
    };
    (items, set, scenes)
}

/// Paths written by [`synth_dataset`].
#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub corpora: Vec<PathBuf>,
    pub features: Vec<PathBuf>,
    pub vocab: PathBuf,
    pub manifest: PathBuf,
}

/// Writes `{train,val,test}.jsonl`, matching `.vfea` feature files,
/// `vocab.txt` built from the training split and `manifest.txt` with the
/// metadata and a SHA-256 per file.
pub fn synth_dataset(
    dir: &Path,
    cfg: &SynthConfig,
    meta: &BTreeMap<String, String>,
) -> Result<SynthFiles> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut corpora = Vec::new();
    let mut features = Vec::new();
    let mut train_texts: Vec<String> = Vec::new();
    for (s, name) in SPLITS.iter().enumerate() {
        let feature_file = format!("{name}.vfea");
        let (items, set, _) = generate_split(cfg, s, &feature_file);
        if s == 0 {
            for it in &items {
                train_texts.push(it.caption.clone());
                train_texts.extend(it.questions.iter().cloned());
            }
        }
        let corpus_path = dir.join(format!("{name}.jsonl"));
        let mut split_meta = meta.clone();
        split_meta.insert("split".into(), name.to_string());
        save_corpus(
            &corpus_path,
            &Corpus {
                meta: split_meta,
                items,
            },
        )?;
        let feature_path = dir.join(&feature_file);
        write_features(&feature_path, &set)?;
        corpora.push(corpus_path);
        features.push(feature_path);
    }
    let vocab = Vocabulary::build(train_texts.iter().map(String::as_str));
    let vocab_path = dir.join("vocab.txt");
    vocab.save(&vocab_path)?;

    let mut manifest = String::new();
    for (k, v) in meta {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    manifest.push_str(&format!(
        "sizes={},{},{}\nrefs_per_item={}\nnum_regions={}\nfeature_dim={}\n",
        cfg.n_train, cfg.n_val, cfg.n_test, cfg.refs_per_item, cfg.num_regions, cfg.feature_dim
    ));
    let mut files: Vec<&PathBuf> = corpora.iter().chain(&features).collect();
    files.push(&vocab_path);
    for p in files {
        let digest = hex::encode(Sha256::digest(fs::read(p)?));
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        manifest.push_str(&format!("sha256.{name}={digest}\n"));
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest)?;
    Ok(SynthFiles {
        corpora,
        features,
        vocab: vocab_path,
        manifest: manifest_path,
    })
}

/// Decodes (shape, colour, size) from a region by argmax over each block;
/// `None` for background regions.
pub fn decode_attributes(region: &ObjectRegion) -> Option<SceneObject> {
    let f = &region.features;
    if f[OBJECTNESS_INDEX] < 0.5 {
        return None;
    }
    let argmax = |block: &[f32]| {
        block
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    Some(SceneObject {
        shape: argmax(&f[SHAPE_OFFSET..SHAPE_OFFSET + SHAPES.len()]),
        color: argmax(&f[COLOR_OFFSET..COLOR_OFFSET + COLORS.len()]),
        size: argmax(&f[SIZE_OFFSET..SIZE_OFFSET + SIZES.len()]),
    })
}
