use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::error::{Error, Result};
use crate::generation::AttentionMask;
use crate::multimodal::{AssembledInput, Slot};
use crate::numerics::{Tape, Tensor, Var};

/// Dropout applied during training forward passes.
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        tape.dropout(x, self.rate, &mut self.rng)
    }
}

/// Per-layer outputs of one encoder pass. `layers[0]` is the embedding
/// output and `layers[L]` the final layer; `attention[l]` is the attention
/// node of layer `l + 1`.
pub struct Encoded {
    pub layers: Vec<Var>,
    pub attention: Vec<Var>,
}

impl Encoded {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the embedding layer")
    }
}

impl Model {
    /// Sums slot content with the learned position rows (and type rows when
    /// enabled). Visual slots are projected through the cross-modal layer.
    pub fn embed_sequence(
        &self,
        tape: &mut Tape,
        slots: &[Slot],
        positions: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        if slots.len() != positions.len() {
            return Err(Error::Shape(format!(
                "{} slots with {} positions",
                slots.len(),
                positions.len()
            )));
        }
        if slots.is_empty() {
            return Err(Error::Empty("cannot embed an empty sequence".into()));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_positions) {
            return Err(Error::PositionOverflow {
                position: p,
                max: cfg.max_positions,
            });
        }
        let mut token_ids = Vec::new();
        let mut region_rows = Vec::new();
        let mut layout = Vec::with_capacity(slots.len());
        for slot in slots {
            match slot {
                Slot::Token(t) => {
                    if *t as usize >= cfg.vocab_size {
                        return Err(Error::UnknownToken(*t));
                    }
                    layout.push((false, token_ids.len()));
                    token_ids.push(*t as usize);
                }
                Slot::Region(o) => {
                    if o.len() != cfg.region_dim() {
                        return Err(Error::Dimension(format!(
                            "object embedding has {} values, projection expects {}",
                            o.len(),
                            cfg.region_dim()
                        )));
                    }
                    layout.push((true, region_rows.len()));
                    region_rows.push(o.clone());
                }
            }
        }
        let tokens = if token_ids.is_empty() {
            None
        } else {
            let table = tape.param(self.ids.token);
            Some(tape.gather_rows(table, &token_ids)?)
        };
        let regions = if region_rows.is_empty() {
            None
        } else {
            let objects = tape.input(Tensor::from_rows(&region_rows)?);
            let w = tape.param(self.ids.projection_w);
            let b = tape.param(self.ids.projection_b);
            Some(tape.affine(objects, w, Some(b))?)
        };
        let parts: Vec<(Var, usize)> = layout
            .iter()
            .map(|&(visual, row)| {
                let src = if visual { regions } else { tokens };
                (src.expect("source exists for its slots"), row)
            })
            .collect();
        let content = tape.stack_rows(&parts)?;
        let pos_table = tape.param(self.ids.position);
        let pos = tape.gather_rows(pos_table, positions)?;
        let mut out = tape.add(content, pos)?;
        if let Some(types) = self.ids.types {
            let table = tape.param(types);
            let type_ids: Vec<usize> = layout.iter().map(|&(visual, _)| visual as usize).collect();
            let ty = tape.gather_rows(table, &type_ids)?;
            out = tape.add(out, ty)?;
        }
        Ok(out)
    }

    /// Embeds an assembled input at positions `0..S`.
    pub fn embed_input(&self, tape: &mut Tape, input: &AssembledInput) -> Result<Var> {
        let positions: Vec<usize> = (0..input.len()).collect();
        self.embed_sequence(tape, &input.slots, &positions)
    }

    /// Runs every encoder layer under `mask`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        embedded: Var,
        mask: &AttentionMask,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Encoded> {
        let s = tape.value(embedded).rows();
        if mask.size() != s {
            return Err(Error::Shape(format!(
                "mask is {0}x{0} but the sequence has {s} slots",
                mask.size()
            )));
        }
        let mut h = embedded;
        if let Some(d) = dropout.as_deref_mut() {
            h = d.apply(tape, h);
        }
        let mut layers = vec![h];
        let mut attention = Vec::with_capacity(self.ids.layers.len());
        for lp in &self.ids.layers {
            let q = {
                let (w, b) = (tape.param(lp.query_w), tape.param(lp.query_b));
                tape.affine(h, w, Some(b))?
            };
            let k = {
                let (w, b) = (tape.param(lp.key_w), tape.param(lp.key_b));
                tape.affine(h, w, Some(b))?
            };
            let v = {
                let (w, b) = (tape.param(lp.value_w), tape.param(lp.value_b));
                tape.affine(h, w, Some(b))?
            };
            let att = tape.attention(q, k, v, mask.as_slice(), self.config.num_heads)?;
            attention.push(att);
            let (ow, ob) = (tape.param(lp.output_w), tape.param(lp.output_b));
            let mut o = tape.affine(att, ow, Some(ob))?;
            if let Some(d) = dropout.as_deref_mut() {
                o = d.apply(tape, o);
            }
            let r = tape.add(h, o)?;
            let (g, b) = (tape.param(lp.attn_norm_gain), tape.param(lp.attn_norm_bias));
            let h1 = tape.layer_norm(r, g, b)?;

            let (w1, b1) = (tape.param(lp.ffn_inner_w), tape.param(lp.ffn_inner_b));
            let inner = tape.affine(h1, w1, Some(b1))?;
            let act = tape.gelu(inner);
            let (w2, b2) = (tape.param(lp.ffn_outer_w), tape.param(lp.ffn_outer_b));
            let mut f = tape.affine(act, w2, Some(b2))?;
            if let Some(d) = dropout.as_deref_mut() {
                f = d.apply(tape, f);
            }
            let r2 = tape.add(h1, f)?;
            let (g, b) = (tape.param(lp.ffn_norm_gain), tape.param(lp.ffn_norm_bias));
            h = tape.layer_norm(r2, g, b)?;
            layers.push(h);
        }
        Ok(Encoded { layers, attention })
    }

    /// Raw vocabulary logits for each row of `hidden`: feed-forward, GELU,
    /// normalization, then the transposed token embedding plus an output bias.
    pub fn decode_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let ids = &self.ids;
        let (w, b) = (tape.param(ids.head_w), tape.param(ids.head_b));
        let t = tape.affine(hidden, w, Some(b))?;
        let t = tape.gelu(t);
        let (g, nb) = (
            tape.param(ids.head_norm_gain),
            tape.param(ids.head_norm_bias),
        );
        let t = tape.layer_norm(t, g, nb)?;
        let e = tape.param(ids.token);
        let ob = tape.param(ids.output_bias);
        tape.affine_transposed(t, e, Some(ob))
    }

    /// Logits at the selected `rows` of a sequence encoded under `mask`.
    pub fn logits_at(
        &self,
        slots: &[Slot],
        positions: &[usize],
        mask: &AttentionMask,
        rows: &[usize],
    ) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let x = self.embed_sequence(&mut tape, slots, positions)?;
        let enc = self.encode(&mut tape, x, mask, None)?;
        let last = enc.last();
        let parts: Vec<(Var, usize)> = rows.iter().map(|&r| (last, r)).collect();
        let picked = tape.stack_rows(&parts)?;
        let logits = self.decode_logits(&mut tape, picked)?;
        Ok(tape.value(logits).clone())
    }
}
