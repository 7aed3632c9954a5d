//! Images as ordered sequences of object regions, and input assembly.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpecialTokens};
use crate::numerics::Tensor;
use crate::TokenId;

/// Box coordinates per region: normalized x0, y0, x1, y1.
pub const BOX_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRegion {
    pub features: Vec<f32>,
    pub bbox: [f32; BOX_DIM],
    /// Detector score, used only for ordering.
    pub relevance: f32,
}

impl ObjectRegion {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.features.len() != feature_dim {
            return Err(Error::Dimension(format!(
                "region has {} features, expected {feature_dim}",
                self.features.len()
            )));
        }
        if let Some(v) = self.bbox.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "box coordinate {v} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Features followed by the box.
pub fn object_embedding(region: &ObjectRegion) -> Vec<f64> {
    region
        .features
        .iter()
        .chain(region.bbox.iter())
        .map(|&v| v as f64)
        .collect()
}

/// Exactly `N` regions in non-increasing relevance order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualSequence {
    regions: Vec<ObjectRegion>,
}

impl VisualSequence {
    /// Sorts by relevance, ties kept in original order.
    pub fn new(
        mut regions: Vec<ObjectRegion>,
        num_regions: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        if regions.len() != num_regions {
            return Err(Error::Dimension(format!(
                "image has {} regions, expected {num_regions}",
                regions.len()
            )));
        }
        for r in &regions {
            r.validate(feature_dim)?;
        }
        regions.sort_by(|a, b| b.relevance.total_cmp(&a.relevance));
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[ObjectRegion] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// `weight · o + bias` for a single object embedding.
pub fn project_region(o: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    if weight.shape().len() != 2 || weight.rows() != o.len() {
        return Err(Error::Dimension(format!(
            "object embedding of {} values against projection {:?}",
            o.len(),
            weight.shape()
        )));
    }
    let x = Tensor::new(vec![1, o.len()], o.to_vec())?;
    Ok(crate::numerics::affine(&x, weight, bias)?.into_data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputMode {
    CaptionOnly,
    ImageOnly,
    ImagePlusCaption,
}

impl InputMode {
    pub fn uses_image(self) -> bool {
        matches!(self, Self::ImageOnly | Self::ImagePlusCaption)
    }

    pub fn uses_caption(self) -> bool {
        matches!(self, Self::CaptionOnly | Self::ImagePlusCaption)
    }
}

/// One input slot. Regions hold the unprojected object embedding; the
/// projection is applied inside the model so it can be trained.
#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    Token(TokenId),
    Region(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput {
    pub mode: InputMode,
    pub slots: Vec<Slot>,
    pub visual_span: std::ops::Range<usize>,
    pub text_span: std::ops::Range<usize>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.slots.len()
    }
}

/// Lays out `[CLS]`, then regions (image modes), then `[SEP]` when both
/// modalities are present, then caption tokens.
pub fn assemble_input(
    mode: InputMode,
    visual: Option<&VisualSequence>,
    caption: Option<&[TokenId]>,
    specials: &SpecialTokens,
    config: &ModelConfig,
) -> Result<AssembledInput> {
    let visual = if mode.uses_image() {
        let v = visual.ok_or_else(|| Error::Modality(format!("{mode:?} needs an image")))?;
        if v.len() != config.num_regions {
            return Err(Error::Dimension(format!(
                "image has {} regions, expected {}",
                v.len(),
                config.num_regions
            )));
        }
        Some(v)
    } else {
        None
    };
    let caption = if mode.uses_caption() {
        let c = caption.ok_or_else(|| Error::Modality(format!("{mode:?} needs a caption")))?;
        if c.len() > config.max_caption_len {
            return Err(Error::CaptionTooLong {
                len: c.len(),
                max: config.max_caption_len,
            });
        }
        Some(c)
    } else {
        None
    };

    let mut slots = vec![Slot::Token(specials.cls)];
    let vstart = slots.len();
    if let Some(v) = visual {
        slots.extend(
            v.regions()
                .iter()
                .map(|r| Slot::Region(object_embedding(r))),
        );
    }
    let visual_span = vstart..slots.len();
    if visual.is_some() && caption.is_some() {
        slots.push(Slot::Token(specials.sep));
    }
    let tstart = slots.len();
    if let Some(c) = caption {
        slots.extend(c.iter().map(|&t| Slot::Token(t)));
    }
    let text_span = tstart..slots.len();
    Ok(AssembledInput {
        mode,
        slots,
        visual_span,
        text_span,
    })
}
