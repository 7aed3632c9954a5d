//! Left-to-right attention masks and greedy decoding by repeatedly
//! appending `[MASK]` to the input.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::multimodal::{AssembledInput, Slot};
use crate::TokenId;

/// Row-major `size x size` matrix of allowed attention edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    allow: Vec<bool>,
    size: usize,
    n_input: usize,
}

impl AttentionMask {
    pub fn from_fn(size: usize, n_input: usize, rule: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allow.push(rule(i, j));
            }
        }
        Self {
            allow,
            size,
            n_input,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_input(&self) -> usize {
        self.n_input
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Rows as 0/1 integers, for display and comparison.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.allow
            .chunks(self.size)
            .map(|r| r.iter().map(|&b| b as u8).collect())
            .collect()
    }
}

/// Inputs see only inputs; each target sees every input, earlier targets
/// and itself.
pub fn build_left_to_right_mask(n_input: usize, n_target: usize) -> AttentionMask {
    AttentionMask::from_fn(n_input + n_target, n_input, |i, j| {
        j < n_input || (i >= n_input && j <= i)
    })
}

/// Mask for one-pass teacher forcing over `X ⊕ y_1..y_T ⊕ M_1..M_{T+1}`.
///
/// The context rows `y_s` follow the left-to-right rule. Each query slot
/// `M_t` sees the inputs, `y_1..y_{t-1}` and itself, which is exactly the
/// view of the `[MASK]` appended at step `t` of [`generate`].
pub fn build_teacher_forcing_mask(n_input: usize, n_target: usize) -> AttentionMask {
    let ctx_end = n_input + n_target;
    AttentionMask::from_fn(ctx_end + n_target + 1, n_input, |i, j| {
        if i < ctx_end {
            j < n_input || (i >= n_input && j <= i && j < ctx_end)
        } else {
            let t = i - ctx_end;
            j < n_input + t || j == i
        }
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationConfig {
    pub max_length: usize,
    pub eos_id: TokenId,
    pub mask_id: TokenId,
    /// Keep per-step logits in the output.
    pub retain_logits: bool,
}

impl GenerationConfig {
    pub const DEFAULT_MAX_LENGTH: usize = 24;

    pub fn for_model(model: &Model) -> Self {
        Self {
            max_length: Self::DEFAULT_MAX_LENGTH,
            eos_id: model.specials().eos,
            mask_id: model.specials().mask,
            retain_logits: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    /// Generated tokens, `[EOS]` excluded.
    pub tokens: Vec<TokenId>,
    /// Logits of every step, including the one that produced `[EOS]`.
    pub step_logits: Option<Vec<Vec<f64>>>,
    pub truncated: bool,
}

/// Greedy choice over `logits`, lowest id on ties. `[PAD]` and `[MASK]`
/// are never chosen.
pub fn argmax_token(logits: &[f64], excluded: &[TokenId]) -> TokenId {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if excluded.contains(&(i as TokenId)) {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i as TokenId)
}

fn step_logits(
    model: &Model,
    input: &AssembledInput,
    prefix: &[TokenId],
    mask_id: TokenId,
) -> Result<Vec<f64>> {
    let n = input.len();
    let len = n + prefix.len() + 1;
    let max = model.config().max_positions;
    if len > max {
        return Err(Error::PositionOverflow {
            position: len - 1,
            max,
        });
    }
    let mut slots = input.slots.clone();
    slots.extend(prefix.iter().map(|&t| Slot::Token(t)));
    slots.push(Slot::Token(mask_id));
    let positions: Vec<usize> = (0..len).collect();
    let mask = build_left_to_right_mask(n, prefix.len() + 1);
    Ok(model
        .logits_at(&slots, &positions, &mask, &[len - 1])?
        .into_data())
}

/// Encodes `X ⊕ prefix ⊕ [MASK]` and predicts the token at the `[MASK]` slot.
pub fn next_token(
    model: &Model,
    input: &AssembledInput,
    prefix: &[TokenId],
) -> Result<(TokenId, Vec<f64>)> {
    let sp = model.specials();
    let logits = step_logits(model, input, prefix, sp.mask)?;
    Ok((argmax_token(&logits, &[sp.pad, sp.mask]), logits))
}

/// Appends predictions until `[EOS]` or `max_length` tokens.
pub fn generate(
    model: &Model,
    input: &AssembledInput,
    cfg: &GenerationConfig,
) -> Result<GenerationOutput> {
    if cfg.max_length == 0 {
        return Err(Error::Config("max_length must be at least 1".into()));
    }
    let excluded = [model.specials().pad, cfg.mask_id];
    let mut tokens = Vec::new();
    let mut kept = cfg.retain_logits.then(Vec::new);
    loop {
        let logits = step_logits(model, input, &tokens, cfg.mask_id)?;
        let next = argmax_token(&logits, &excluded);
        if let Some(k) = kept.as_mut() {
            k.push(logits);
        }
        if next == cfg.eos_id {
            return Ok(GenerationOutput {
                tokens,
                step_logits: kept,
                truncated: false,
            });
        }
        tokens.push(next);
        if tokens.len() == cfg.max_length {
            return Ok(GenerationOutput {
                tokens,
                step_logits: kept,
                truncated: true,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::multimodal::{assemble_input, InputMode};
    use proptest::prelude::*;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            vocab_size: vocab,
            max_positions: 40,
            feature_dim: 3,
            num_regions: 2,
            max_caption_len: 6,
            max_question_len: 8,
            use_type_embeddings: false,
        }
    }

    /// Zero embedding table and a bias that favours `ids` by `values`.
    fn rigged(favour: &[(usize, f64)]) -> Model {
        let mut m = Model::init(tiny_config(12), 1).unwrap();
        let e = m.token_embedding_id();
        let ob = m.output_bias_id();
        let p = m.params_mut();
        p.get_mut(e).value.fill(0.0);
        for &(id, v) in favour {
            p.get_mut(ob).value.data_mut()[id] = v;
        }
        m
    }

    fn caption_input(m: &Model, caption: &[TokenId]) -> AssembledInput {
        assemble_input(
            InputMode::CaptionOnly,
            None,
            Some(caption),
            m.specials(),
            m.config(),
        )
        .unwrap()
    }

    #[test]
    fn mask_examples() {
        assert_eq!(
            build_left_to_right_mask(2, 2).to_rows(),
            vec![
                vec![1, 1, 0, 0],
                vec![1, 1, 0, 0],
                vec![1, 1, 1, 0],
                vec![1, 1, 1, 1]
            ]
        );
        assert!(build_left_to_right_mask(3, 0).as_slice().iter().all(|&b| b));
        let m = build_left_to_right_mask(1, 3);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allows(i, j), j <= i);
            }
        }
    }

    #[test]
    fn teacher_forcing_mask_rows_match_generation_views() {
        // X = 2 slots, y1 y2, then M1 M2 M3.
        let m = build_teacher_forcing_mask(2, 2);
        assert_eq!(
            m.to_rows(),
            vec![
                vec![1, 1, 0, 0, 0, 0, 0],
                vec![1, 1, 0, 0, 0, 0, 0],
                vec![1, 1, 1, 0, 0, 0, 0],
                vec![1, 1, 1, 1, 0, 0, 0],
                vec![1, 1, 0, 0, 1, 0, 0],
                vec![1, 1, 1, 0, 0, 1, 0],
                vec![1, 1, 1, 1, 0, 0, 1],
            ]
        );
    }

    #[test]
    fn rigged_heads() {
        let m = rigged(&[(7, 50.0)]);
        let x = caption_input(&m, &[6, 8]);
        assert_eq!(next_token(&m, &x, &[]).unwrap().0, 7);

        let eos = m.specials().eos as usize;
        let m = rigged(&[(eos, 50.0)]);
        assert_eq!(next_token(&m, &x, &[9]).unwrap().0, eos as TokenId);

        let m = rigged(&[(3, 5.0), (9, 5.0)]);
        assert_eq!(next_token(&m, &x, &[]).unwrap().0, 3);
    }

    #[test]
    fn pad_and_mask_never_chosen() {
        let m = rigged(&[(0, 90.0), (4, 80.0), (10, 1.0)]);
        let x = caption_input(&m, &[6]);
        assert_eq!(next_token(&m, &x, &[]).unwrap().0, 10);
    }

    #[test]
    fn immediate_eos_and_truncation() {
        let eos = crate::model::SpecialTokens::STANDARD.eos as usize;
        let m = rigged(&[(eos, 50.0)]);
        let x = caption_input(&m, &[6]);
        let cfg = GenerationConfig::for_model(&m);
        let out = generate(&m, &x, &cfg).unwrap();
        assert!(out.tokens.is_empty());
        assert!(!out.truncated);

        let m = rigged(&[(7, 50.0)]);
        let cfg = GenerationConfig {
            max_length: 5,
            ..GenerationConfig::for_model(&m)
        };
        let out = generate(&m, &x, &cfg).unwrap();
        assert_eq!(out.tokens, vec![7; 5]);
        assert!(out.truncated);
    }

    #[test]
    fn generation_is_deterministic_and_retains_logits() {
        let m = Model::init(tiny_config(12), 9).unwrap();
        let x = caption_input(&m, &[6, 7, 8]);
        let cfg = GenerationConfig {
            max_length: 4,
            retain_logits: true,
            ..GenerationConfig::for_model(&m)
        };
        let a = generate(&m, &x, &cfg).unwrap();
        let b = generate(&m, &x, &cfg).unwrap();
        assert_eq!(a, b);
        let steps = a.step_logits.as_ref().unwrap();
        assert_eq!(steps.len(), a.tokens.len() + usize::from(!a.truncated));
        for (t, logits) in steps.iter().enumerate() {
            let (_, single) = next_token(&m, &x, &a.tokens[..t]).unwrap();
            assert_eq!(&single, logits);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut cfg = tiny_config(12);
        cfg.max_positions = cfg.num_regions + cfg.max_caption_len + cfg.max_question_len + 2;
        let m = Model::init(cfg, 2).unwrap();
        let x = caption_input(&m, &[6; 6]);
        let prefix = vec![7; m.config().max_positions - x.len()];
        assert!(matches!(
            next_token(&m, &x, &prefix),
            Err(Error::PositionOverflow { .. })
        ));
    }

    #[test]
    fn input_rows_ignore_appended_targets() {
        let m = Model::init(tiny_config(12), 4).unwrap();
        let x = caption_input(&m, &[6, 9, 10]);
        let n = x.len();
        let rows: Vec<usize> = (0..n).collect();
        let base = m
            .logits_at(
                &x.slots,
                &(0..n).collect::<Vec<_>>(),
                &build_left_to_right_mask(n, 0),
                &rows,
            )
            .unwrap();
        let mut slots = x.slots.clone();
        slots.extend([Slot::Token(7), Slot::Token(8), Slot::Token(4)]);
        let longer = m
            .logits_at(
                &slots,
                &(0..n + 3).collect::<Vec<_>>(),
                &build_left_to_right_mask(n, 3),
                &rows,
            )
            .unwrap();
        for (a, b) in base.data().iter().zip(longer.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn mask_rule_holds(n_input in 1usize..10, n_target in 0usize..10) {
            let m = build_left_to_right_mask(n_input, n_target);
            prop_assert_eq!(m.size(), n_input + n_target);
            for i in 0..m.size() {
                for j in 0..m.size() {
                    let expected = if i < n_input { j < n_input } else { j < n_input || j <= i };
                    prop_assert_eq!(m.allows(i, j), expected);
                }
            }
        }

        #[test]
        fn argmax_is_first_maximum(values in proptest::collection::vec(-3i32..3, 1..20)) {
            let logits: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let best = argmax_token(&logits, &[]) as usize;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(logits[best], max);
            prop_assert!(logits[..best].iter().all(|&v| v < max));
        }
    }
}
