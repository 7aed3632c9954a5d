//! Cross-modal similarity of `[CLS]` states per layer, and summaries of
//! where generated tokens look in the input.

use crate::error::{Error, Result};
use crate::generation::build_left_to_right_mask;
use crate::model::{Model, ModelConfig};
use crate::multimodal::{assemble_input, AssembledInput, InputMode, Slot, VisualSequence};
use crate::numerics::{Tape, Var};
use crate::TokenId;

/// Seed of the untrained baseline model.
pub const RANDOM_MODEL_SEED: u64 = 0x5eed_0000_7a11;

/// Label used for the untrained baseline in reports.
pub const RANDOM_LABEL: &str = "random";

pub fn random_model(config: ModelConfig) -> Result<Model> {
    Model::init(config, RANDOM_MODEL_SEED)
}

/// How `[CLS]` vectors are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Centering {
    /// Cosine of the hidden states as they are.
    Raw,
    /// Cosine after subtracting, per layer and per modality, the mean
    /// `[CLS]` vector over the paired set.
    Centered,
}

impl Centering {
    pub fn name(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Centered => "centered",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "centered" => Ok(Self::Centered),
            _ => Err(Error::Config(format!("unknown centering {s:?}, expected raw or centered"))),
        }
    }
}

/// Mean per-layer cosine between image-only and caption-only `[CLS]` states.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub label: String,
    pub centering: Centering,
    /// Entry `l` is layer `l + 1`.
    pub xsim: Vec<f64>,
    pub items: usize,
}

impl ProbeReport {
    pub fn last(&self) -> f64 {
        *self.xsim.last().expect("at least one layer")
    }

    pub const CSV_HEADER: &'static str = "layer_index,model_label,xsim";

    /// Rows of `layer_index,model_label,xsim` without the header.
    pub fn csv_rows(&self) -> String {
        self.xsim
            .iter()
            .enumerate()
            .map(|(l, x)| format!("{},{},{x:.6}\n", l + 1, self.label))
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// `[CLS]` vector at every layer `1..=L` for one input, under full
/// attention among the input slots.
pub fn cls_states(model: &Model, input: &AssembledInput) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new(model.params());
    let x = model.embed_input(&mut tape, input)?;
    let mask = build_left_to_right_mask(input.len(), 0);
    let enc = model.encode(&mut tape, x, &mask, None)?;
    Ok(enc.layers[1..]
        .iter()
        .map(|&v| tape.value(v).row(0).to_vec())
        .collect())
}

pub fn xsim_per_layer(
    model: &Model,
    pairs: &[(VisualSequence, Vec<TokenId>)],
    label: &str,
    centering: Centering,
) -> Result<ProbeReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("probe needs at least one image/caption pair".into()));
    }
    let (sp, cfg) = (model.specials(), model.config());
    let mut image = Vec::with_capacity(pairs.len());
    let mut text = Vec::with_capacity(pairs.len());
    for (visual, caption) in pairs {
        let a = assemble_input(InputMode::ImageOnly, Some(visual), None, sp, cfg)?;
        let b = assemble_input(InputMode::CaptionOnly, None, Some(caption), sp, cfg)?;
        image.push(cls_states(model, &a)?);
        text.push(cls_states(model, &b)?);
    }
    if centering == Centering::Centered {
        center(&mut image);
        center(&mut text);
    }
    let layers = cfg.num_layers;
    let n = pairs.len() as f64;
    let xsim = (0..layers)
        .map(|l| image.iter().zip(&text).map(|(a, b)| cosine(&a[l], &b[l])).sum::<f64>() / n)
        .collect();
    Ok(ProbeReport {
        label: label.to_string(),
        centering,
        xsim,
        items: pairs.len(),
    })
}

/// Subtracts the per-layer mean over items.
fn center(states: &mut [Vec<Vec<f64>>]) {
    let n = states.len() as f64;
    for l in 0..states[0].len() {
        let d = states[0][l].len();
        let mut mean = vec![0.0; d];
        for s in states.iter() {
            for (m, x) in mean.iter_mut().zip(&s[l]) {
                *m += x / n;
            }
        }
        for s in states.iter_mut() {
            for (x, m) in s[l].iter_mut().zip(&mean) {
                *x -= m;
            }
        }
    }
}

/// Last-layer attention paid to each input slot by the `[MASK]` rows that
/// produced the generated tokens, averaged over heads and steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSummary {
    pub weights: Vec<f64>,
    /// Most attended input slot; lowest index on ties.
    pub argmax: usize,
}

/// Replays each decoding step `X ⊕ y_<t ⊕ [MASK]`. The rest of each
/// attention row, up to 1, falls on the earlier generated tokens and on the
/// `[MASK]` slot itself.
pub fn attention_summary(
    model: &Model,
    input: &AssembledInput,
    generated: &[TokenId],
) -> Result<AttentionSummary> {
    if generated.is_empty() {
        return Err(Error::Empty("no generated tokens to summarize".into()));
    }
    let n = input.len();
    let mask_id = model.specials().mask;
    let mut weights = vec![0.0; n];
    for t in 0..generated.len() {
        let mut slots = input.slots.clone();
        slots.extend(generated[..t].iter().map(|&y| Slot::Token(y)));
        slots.push(Slot::Token(mask_id));
        let len = slots.len();
        let positions: Vec<usize> = (0..len).collect();
        let mut tape = Tape::new(model.params());
        let x = model.embed_sequence(&mut tape, &slots, &positions)?;
        let enc = model.encode(&mut tape, x, &build_left_to_right_mask(n, t + 1), None)?;
        let att: Var = *enc.attention.last().expect("at least one layer");
        let (probs, heads, sq, sk) = tape.attention_probs(att).expect("attention node");
        let row = sq - 1;
        for h in 0..heads {
            let base = (h * sq + row) * sk;
            for (w, p) in weights.iter_mut().zip(&probs[base..base + n]) {
                *w += p;
            }
        }
    }
    let denom = (generated.len() * model.config().num_heads) as f64;
    for w in &mut weights {
        *w /= denom;
    }
    let argmax = weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > weights[best] { i } else { best });
    Ok(AttentionSummary { weights, argmax })
}
