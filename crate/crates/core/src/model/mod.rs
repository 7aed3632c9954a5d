//! Transformer encoder with learned positions, tied output embeddings and a
//! masked-token prediction head.

mod checkpoint;
mod encoder;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use encoder::{Dropout, Encoded};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::multimodal::BOX_DIM;
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::TokenId;

/// Standard deviation of the truncated normal used for weight init.
pub const INIT_STD: f64 = 0.02;

/// Name prefix of the cross-modal projection parameters. Everything else
/// belongs to the text model.
pub const PROJECTION_PREFIX: &str = "projection.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub feature_dim: usize,
    pub num_regions: usize,
    pub max_caption_len: usize,
    pub max_question_len: usize,
    pub use_type_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 128,
            ffn_dim: 512,
            vocab_size,
            max_positions: 64,
            feature_dim: 32,
            num_regions: 8,
            max_caption_len: 16,
            max_question_len: 24,
            use_type_embeddings: false,
        }
    }

    /// BERT-base sizes with 36 regions of 2048-d features.
    pub fn base_scale(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            model_dim: 768,
            ffn_dim: 3072,
            vocab_size,
            max_positions: 512,
            feature_dim: 2048,
            num_regions: 36,
            max_caption_len: 64,
            max_question_len: 24,
            use_type_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Width of an object embedding: features followed by the box.
    pub fn region_dim(&self) -> usize {
        self.feature_dim + BOX_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("feature_dim", self.feature_dim),
            ("num_regions", self.num_regions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        let needed = self.num_regions + self.max_caption_len + self.max_question_len + 2;
        if self.max_positions < needed {
            return Err(Error::Config(format!(
                "max_positions {} is below num_regions + max_caption_len + max_question_len + 2 = {needed}",
                self.max_positions
            )));
        }
        if self.vocab_size <= SpecialTokens::STANDARD.max_id() as usize {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the special tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 11] = [
        "num_layers",
        "num_heads",
        "model_dim",
        "ffn_dim",
        "vocab_size",
        "max_positions",
        "feature_dim",
        "num_regions",
        "max_caption_len",
        "max_question_len",
        "use_type_embeddings",
    ];

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let v = [
            self.num_layers.to_string(),
            self.num_heads.to_string(),
            self.model_dim.to_string(),
            self.ffn_dim.to_string(),
            self.vocab_size.to_string(),
            self.max_positions.to_string(),
            self.feature_dim.to_string(),
            self.num_regions.to_string(),
            self.max_caption_len.to_string(),
            self.max_question_len.to_string(),
            self.use_type_embeddings.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(v)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Overrides fields named in `pairs`; keys that are not model fields are ignored.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in pairs {
            let parse_usize = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("{key}={value} is not a count")))
            };
            match key.as_str() {
                "num_layers" => self.num_layers = parse_usize()?,
                "num_heads" => self.num_heads = parse_usize()?,
                "model_dim" => self.model_dim = parse_usize()?,
                "ffn_dim" => self.ffn_dim = parse_usize()?,
                "vocab_size" => self.vocab_size = parse_usize()?,
                "max_positions" => self.max_positions = parse_usize()?,
                "feature_dim" => self.feature_dim = parse_usize()?,
                "num_regions" => self.num_regions = parse_usize()?,
                "max_caption_len" => self.max_caption_len = parse_usize()?,
                "max_question_len" => self.max_question_len = parse_usize()?,
                "use_type_embeddings" => {
                    self.use_type_embeddings = value
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}={value} is not a bool")))?
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(missing) = Self::KEYS.iter().find(|k| !pairs.contains_key(**k)) {
            return Err(Error::Config(format!("missing model field {missing}")));
        }
        let mut cfg = Self::toy(0);
        cfg.apply_pairs(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
    pub eos: TokenId,
}

impl SpecialTokens {
    pub const STANDARD: SpecialTokens = SpecialTokens {
        pad: 0,
        unk: 1,
        cls: 2,
        sep: 3,
        mask: 4,
        eos: 5,
    };

    pub const NAMES: [&'static str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[EOS]"];

    pub fn all(&self) -> [TokenId; 6] {
        [self.pad, self.unk, self.cls, self.sep, self.mask, self.eos]
    }

    pub fn max_id(&self) -> TokenId {
        self.all().into_iter().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub output_w: ParamId,
    pub output_b: ParamId,
    pub attn_norm_gain: ParamId,
    pub attn_norm_bias: ParamId,
    pub ffn_inner_w: ParamId,
    pub ffn_inner_b: ParamId,
    pub ffn_outer_w: ParamId,
    pub ffn_outer_b: ParamId,
    pub ffn_norm_gain: ParamId,
    pub ffn_norm_bias: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamIds {
    pub token: ParamId,
    pub position: ParamId,
    pub types: Option<ParamId>,
    pub projection_w: ParamId,
    pub projection_b: ParamId,
    pub layers: Vec<LayerParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub head_norm_gain: ParamId,
    pub head_norm_bias: ParamId,
    pub output_bias: ParamId,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Ones,
    Zeros,
}

/// Configuration plus every learnable tensor. The output vocabulary
/// projection reuses `embeddings.token`; no separate output matrix exists.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    specials: SpecialTokens,
    params: ParamStore,
    pub(crate) ids: ParamIds,
}

impl Model {
    /// Deterministic random initialization: truncated normal(0, 0.02) weights,
    /// unit norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |_, shape, kind| {
            Ok(match kind {
                InitKind::Normal => truncated_normal(&mut rng, shape),
                InitKind::Ones => Tensor::filled(shape, 1.0),
                InitKind::Zeros => Tensor::zeros(shape),
            })
        })
    }

    /// Registers every parameter in canonical order, asking `make` for each value.
    pub fn build<F>(config: ModelConfig, mut make: F) -> Result<Self>
    where
        F: FnMut(&str, &[usize], InitKind) -> Result<Tensor>,
    {
        config.validate()?;
        let (d, v, f) = (config.model_dim, config.vocab_size, config.ffn_dim);
        let mut store = ParamStore::new();
        let mut reg = |name: String, shape: &[usize], kind: InitKind| -> Result<ParamId> {
            let t = make(&name, shape, kind)?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(store.register(name, t, true))
        };
        use InitKind::*;
        let token = reg("embeddings.token".into(), &[v, d], Normal)?;
        let position = reg(
            "embeddings.position".into(),
            &[config.max_positions, d],
            Normal,
        )?;
        let types = if config.use_type_embeddings {
            Some(reg("embeddings.type".into(), &[2, d], Normal)?)
        } else {
            None
        };
        let projection_w = reg(
            format!("{PROJECTION_PREFIX}weight"),
            &[config.region_dim(), d],
            Normal,
        )?;
        let projection_b = reg(format!("{PROJECTION_PREFIX}bias"), &[d], Zeros)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerParams {
                query_w: reg(p("attention.query.weight"), &[d, d], Normal)?,
                query_b: reg(p("attention.query.bias"), &[d], Zeros)?,
                key_w: reg(p("attention.key.weight"), &[d, d], Normal)?,
                key_b: reg(p("attention.key.bias"), &[d], Zeros)?,
                value_w: reg(p("attention.value.weight"), &[d, d], Normal)?,
                value_b: reg(p("attention.value.bias"), &[d], Zeros)?,
                output_w: reg(p("attention.output.weight"), &[d, d], Normal)?,
                output_b: reg(p("attention.output.bias"), &[d], Zeros)?,
                attn_norm_gain: reg(p("attention.norm.gain"), &[d], Ones)?,
                attn_norm_bias: reg(p("attention.norm.bias"), &[d], Zeros)?,
                ffn_inner_w: reg(p("ffn.inner.weight"), &[d, f], Normal)?,
                ffn_inner_b: reg(p("ffn.inner.bias"), &[f], Zeros)?,
                ffn_outer_w: reg(p("ffn.outer.weight"), &[f, d], Normal)?,
                ffn_outer_b: reg(p("ffn.outer.bias"), &[d], Zeros)?,
                ffn_norm_gain: reg(p("ffn.norm.gain"), &[d], Ones)?,
                ffn_norm_bias: reg(p("ffn.norm.bias"), &[d], Zeros)?,
            });
        }
        let head_w = reg("head.transform.weight".into(), &[d, d], Normal)?;
        let head_b = reg("head.transform.bias".into(), &[d], Zeros)?;
        let head_norm_gain = reg("head.norm.gain".into(), &[d], Ones)?;
        let head_norm_bias = reg("head.norm.bias".into(), &[d], Zeros)?;
        let output_bias = reg("head.output_bias".into(), &[v], Zeros)?;
        Ok(Self {
            config,
            specials: SpecialTokens::STANDARD,
            params: store,
            ids: ParamIds {
                token,
                position,
                types,
                projection_w,
                projection_b,
                layers,
                head_w,
                head_b,
                head_norm_gain,
                head_norm_bias,
                output_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.ids.token
    }

    pub fn output_bias_id(&self) -> ParamId {
        self.ids.output_bias
    }

    pub fn projection_ids(&self) -> (ParamId, ParamId) {
        (self.ids.projection_w, self.ids.projection_b)
    }

    pub fn is_projection(name: &str) -> bool {
        name.starts_with(PROJECTION_PREFIX)
    }

    /// Checksum of every text-model tensor (all but the projection).
    pub fn text_model_checksum(&self) -> String {
        self.params.checksum(|n| !Self::is_projection(n))
    }

    pub fn projection_checksum(&self) -> String {
        self.params.checksum(Self::is_projection)
    }

    /// Copies the values of every parameter selected by `filter` from `other`.
    pub fn copy_from(&mut self, other: &Model, filter: impl Fn(&str) -> bool) -> Result<()> {
        if other.config != self.config {
            return Err(Error::Config(
                "cannot copy parameters between models with different configs".into(),
            ));
        }
        let ids: Vec<_> = self
            .params
            .iter()
            .filter(|(_, p)| filter(&p.name))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.params.get_mut(id).value = other.params.get(id).value.clone();
        }
        Ok(())
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 * INIT_STD {
                break z;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
